"""JSON Lines image manifests.

One object per line::

    {"path": "img/s01_a.png", "subject_id": "s01", "sample_id": "a",
     "landmarks": [x1, y1, ..., x5, y5], "partition": "fa"}

``landmarks`` and ``partition`` are optional. Relative paths resolve against
the manifest's directory.
"""
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from ..errors import DuplicateIdentityError, ManifestParseError, MissingFieldError

REQUIRED_FIELDS = ("path", "subject_id", "sample_id")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    sample_id: str
    landmarks: tuple = None
    partition: str = ""

    @property
    def key(self):
        return (self.subject_id, self.sample_id)

    def to_json(self):
        d = asdict(self)
        if self.landmarks is None:
            d.pop("landmarks")
        else:
            d["landmarks"] = [float(v) for pt in self.landmarks for v in pt]
        return d


@dataclass(frozen=True)
class ImageManifest:
    entries: tuple
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        seen = {}
        for i, e in enumerate(self.entries):
            if e.key in seen:
                raise DuplicateIdentityError(
                    f"duplicate (subject_id, sample_id) {e.key!r} at entries {seen[e.key]} and {i}")
            seen[e.key] = i

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def subjects(self):
        return sorted({e.subject_id for e in self.entries})

    def partition(self, name):
        return ImageManifest(tuple(e for e in self.entries if e.partition == name), self.root)

    def select(self, predicate):
        return ImageManifest(tuple(e for e in self.entries if predicate(e)), self.root)

    def head(self, n):
        return ImageManifest(self.entries[:n], self.root)

    def concat(self, other):
        """Entries of both manifests; paths are made absolute so roots may differ."""
        entries = [_absolute(self, e) for e in self.entries] + [_absolute(other, e) for e in other.entries]
        return ImageManifest(tuple(entries), Path("/"))


def _absolute(manifest, entry):
    return ManifestEntry(str(manifest.resolve(entry).resolve()), entry.subject_id, entry.sample_id,
                         entry.landmarks, entry.partition)


def _parse_landmarks(value, lineno):
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != 10:
        raise ManifestParseError("landmarks must be a flat list of 10 numbers [x1,y1,...,x5,y5]", lineno)
    try:
        flat = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ManifestParseError("landmarks must be numeric", lineno) from None
    return tuple((flat[2 * i], flat[2 * i + 1]) for i in range(5))


def parse_manifest(text, root="."):
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ManifestParseError("each line must be a JSON object", lineno)
        for name in REQUIRED_FIELDS:
            if name not in obj:
                raise MissingFieldError(f"missing field {name!r}", lineno)
        entries.append(ManifestEntry(
            path=str(obj["path"]),
            subject_id=str(obj["subject_id"]),
            sample_id=str(obj["sample_id"]),
            landmarks=_parse_landmarks(obj.get("landmarks"), lineno),
            partition=str(obj.get("partition", "")),
        ))
    if not entries:
        raise ManifestParseError("manifest is empty", 1)
    return ImageManifest(tuple(entries), Path(root))


def load_manifest(path):
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def write_manifest(manifest_or_entries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest_or_entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")
    return path
