"""Command reports: one record per CLI invocation, rendered as text or JSON."""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional

from config import ReportSettings

BANNER = "=" * 60


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            sha.update(chunk)
    return sha.hexdigest()


@dataclass
class Report:
    command: List[str]
    inputs_digest: Dict[str, str] = field(default_factory=dict)
    payload: Dict[str, Any] = field(default_factory=dict)
    tolerances: Dict[str, float] = field(default_factory=dict)
    solver: Optional[Dict[str, Any]] = None
    warnings: List[str] = field(default_factory=list)
    exit_status: int = 0
    schema_version: str = ReportSettings["schema_version"]

    def add_inputs(self, files: Dict[str, Optional[str]]) -> None:
        for role, path in files.items():
            if path:
                self.inputs_digest[role] = file_digest(path)

    def warn(self, messages: Iterable[str]) -> None:
        for message in messages:
            if message not in self.warnings:
                self.warnings.append(message)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Report":
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        lines = [BANNER, f"martinlab {self.command[0] if self.command else ''}".rstrip(), BANNER]
        lines += _text_lines(self.payload, 0)
        if self.solver:
            lines += ["", "Solver:"] + _text_lines(self.solver, 1)
        if self.tolerances:
            lines += ["", "Tolerances:"] + _text_lines(self.tolerances, 1)
        for message in self.warnings:
            lines.append(f"Warning: {message}")
        lines += [BANNER, f"exit status: {self.exit_status}"]
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        return self.to_json() + "\n" if fmt == "json" else self.to_text()

    def write(self, path: str, fmt: str) -> None:
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as handle:
            handle.write(self.render(fmt))
        os.replace(tmp_path, path)


def _scalar(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _text_lines(value: Any, indent: int) -> List[str]:
    pad = "  " * indent
    lines: List[str] = []
    if isinstance(value, dict):
        for key, item in value.items():
            if isinstance(item, (dict, list)) and item:
                lines.append(f"{pad}{key}:")
                lines += _text_lines(item, indent + 1)
            else:
                lines.append(f"{pad}{key}: {_scalar(item)}")
    elif isinstance(value, list):
        for item in value:
            if isinstance(item, dict):
                summary = ", ".join(f"{k}={_scalar(v)}" for k, v in item.items() if not isinstance(v, (dict, list)))
                lines.append(f"{pad}- {summary}")
            else:
                lines.append(f"{pad}- {_scalar(item)}")
    else:
        lines.append(f"{pad}{_scalar(value)}")
    return lines
