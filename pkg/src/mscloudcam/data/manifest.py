"""Split manifests: line-oriented text, one ``split <name> <count>`` header
per split followed by one sample id per line."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

from ..errors import DataError


@dataclass
class SplitManifest:
    splits: Dict[str, List[str]] = field(default_factory=dict)

    def validate(self) -> "SplitManifest":
        seen: Dict[str, str] = {}
        for name, ids in self.splits.items():
            if len(set(ids)) != len(ids):
                raise DataError(f"manifest: split {name!r} repeats sample ids")
            for sid in ids:
                if sid in seen:
                    raise DataError(f"manifest: id {sid!r} appears in both "
                                    f"{seen[sid]!r} and {name!r}")
                seen[sid] = name
        return self

    @classmethod
    def parse(cls, path) -> "SplitManifest":
        p = Path(path)
        if not p.exists():
            raise DataError(f"manifest not found: {p}")
        splits: Dict[str, List[str]] = {}
        current: List[str] = []
        declared: Dict[str, int] = {}
        for ln, raw in enumerate(p.read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("split "):
                parts = line.split()
                if len(parts) != 3:
                    raise DataError(f"{p}:{ln}: expected 'split <name> <count>'")
                name = parts[1]
                try:
                    count = int(parts[2])
                except ValueError:
                    raise DataError(f"{p}:{ln}: count {parts[2]!r} is not an integer") from None
                if name in splits:
                    raise DataError(f"{p}:{ln}: duplicate split {name!r}")
                current = []
                splits[name] = current
                declared[name] = count
            else:
                if not splits:
                    raise DataError(f"{p}:{ln}: sample id before any split header")
                current.append(line)
        for name, count in declared.items():
            if len(splits[name]) != count:
                raise DataError(f"{p}: split {name!r} declares {count} ids "
                                f"but lists {len(splits[name])}")
        return cls(splits).validate()

    def write(self, path) -> None:
        self.validate()
        lines = []
        for name, ids in self.splits.items():
            lines.append(f"split {name} {len(ids)}")
            lines.extend(ids)
        Path(path).write_text("\n".join(lines) + "\n")

    def ids(self, split: str) -> List[str]:
        if split not in self.splits:
            raise DataError(f"manifest: no split named {split!r}; "
                            f"have {sorted(self.splits)}")
        return list(self.splits[split])
