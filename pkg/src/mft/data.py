"""Dataset ingestion, standardization, subject-exclusive folds, and a
synthetic two-modality generator with planted cross-modal synergy.

On-disk format: a small text manifest indexing raw little-endian float64
tensor files, one file per sample per modality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError, Rng

MANIFEST_MAGIC = "mft-manifest v1"

ROLE_ALPHA = "alpha_driven"
ROLE_BETA = "beta_driven"
ROLE_SYNERGY = "synergy"


class LoadError(ValueError):
    """A manifest or tensor file failed validation."""


@dataclass
class Sample:
    id: str
    subject: str
    modalities: dict[str, np.ndarray]
    labels: np.ndarray


@dataclass
class ManifestRow:
    id: str
    subject: str
    paths: dict[str, str]
    labels: np.ndarray


@dataclass
class DatasetManifest:
    root: Path
    num_labels: int
    modalities: list[tuple[str, tuple[int, ...]]]
    rows: list[ManifestRow]
    _by_id: dict[str, ManifestRow] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {row.id: row for row in self.rows}

    def row(self, sample_id: str) -> ManifestRow:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise LoadError(f"no sample with id {sample_id!r}") from None

    def subjects(self) -> list[str]:
        return sorted({row.subject for row in self.rows})

    def modality_shape(self, name: str) -> tuple[int, ...]:
        for mod_name, shape in self.modalities:
            if mod_name == name:
                return shape
        raise LoadError(f"no modality named {name!r}")


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(part) for part in text.split("x"))
    except ValueError:
        raise LoadError(f"bad modality shape {text!r}") from None
    if not shape or any(s <= 0 for s in shape):
        raise LoadError(f"bad modality shape {text!r}")
    return shape


def _parse_labels(text: str, num_labels: int, row_id: str) -> np.ndarray:
    if len(text) != num_labels or set(text) - {"0", "1"}:
        raise LoadError(f"row {row_id!r}: label string {text!r} is not {num_labels} chars of 0/1")
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.float64) - ord("0")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest: unique ids, files present with the
    declared element counts, labels the declared width."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise LoadError(f"{path}: missing '{MANIFEST_MAGIC}' header")
    if len(lines) < 2 or not lines[1].startswith("C="):
        raise LoadError(f"{path}: second line must be C=<int>")
    try:
        num_labels = int(lines[1][2:])
    except ValueError:
        raise LoadError(f"{path}: bad label count {lines[1]!r}") from None

    modalities: list[tuple[str, tuple[int, ...]]] = []
    body_start = 2
    for line in lines[2:]:
        if not line.startswith("modality "):
            break
        parts = line.split()
        if len(parts) != 3:
            raise LoadError(f"{path}: bad modality line {line!r}")
        modalities.append((parts[1], _parse_shape(parts[2])))
        body_start += 1
    if not modalities:
        raise LoadError(f"{path}: no modality lines")

    root = path.parent
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    for line in lines[body_start:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + len(modalities):
            raise LoadError(f"{path}: row {parts[0]!r} has {len(parts)} fields, expected {3 + len(modalities)}")
        row_id, subject = parts[0], parts[1]
        if row_id in seen:
            raise LoadError(f"{path}: duplicate sample id {row_id!r}")
        seen.add(row_id)
        paths = dict(zip((name for name, _ in modalities), parts[2:-1]))
        labels = _parse_labels(parts[-1], num_labels, row_id)
        for (name, shape), rel in zip(modalities, paths.values()):
            file = root / rel
            if not file.is_file():
                raise LoadError(f"row {row_id!r}: missing file {rel}")
            expected = int(np.prod(shape)) * 8
            actual = file.stat().st_size
            if actual != expected:
                raise LoadError(f"row {row_id!r}: {rel} holds {actual // 8} values, descriptor says {np.prod(shape)}")
        rows.append(ManifestRow(row_id, subject, paths, labels))
    return DatasetManifest(root=root, num_labels=num_labels, modalities=modalities, rows=rows)


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    row = manifest.row(sample_id)
    tensors = {}
    for name, shape in manifest.modalities:
        raw = (manifest.root / row.paths[name]).read_bytes()
        values = np.frombuffer(raw, dtype="<f8")
        if values.size != int(np.prod(shape)):
            raise LoadError(f"row {sample_id!r}: {row.paths[name]} holds {values.size} values, descriptor says {np.prod(shape)}")
        tensors[name] = values.reshape(shape).copy()
    return Sample(id=row.id, subject=row.subject, modalities=tensors, labels=row.labels.copy())


def load_all(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(manifest, row.id) for row in manifest.rows]


def write_manifest(path, num_labels: int, modalities, rows) -> None:
    """Emit the text manifest; rows are (id, subject, paths-in-order, label string)."""
    lines = [MANIFEST_MAGIC, f"C={num_labels}"]
    for name, shape in modalities:
        lines.append(f"modality {name} {'x'.join(str(s) for s in shape)}")
    for row_id, subject, paths, label in rows:
        lines.append(",".join([row_id, subject, *paths, label]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stack_inputs(samples: list[Sample], names: list[str]) -> dict[str, np.ndarray]:
    return {name: np.stack([s.modalities[name] for s in samples]) for name in names}


def stack_labels(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.labels for s in samples])


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class StandardizationStats:
    """Mean and population std per modality, from the training split only.

    Scalar statistics by default; per-element arrays when requested.
    """

    stats: dict[str, tuple]


def zscore(train_samples: list[Sample], per_element: bool = False) -> StandardizationStats:
    if len(train_samples) < 2:
        raise ContractError("standardization needs at least 2 training samples")
    out: dict[str, tuple] = {}
    for name in train_samples[0].modalities:
        stacked = np.stack([s.modalities[name] for s in train_samples])
        if per_element:
            mean = stacked.mean(axis=0)
            std = stacked.std(axis=0)  # population convention
            if np.any(std == 0.0):
                raise ContractError(f"modality {name!r} has constant elements on the training split")
        else:
            mean = float(stacked.mean())
            std = float(stacked.std())
            if std == 0.0:
                raise ContractError(f"modality {name!r} is constant on the training split")
        out[name] = (mean, std)
    return StandardizationStats(out)


def apply_standardization(stats: StandardizationStats, sample: Sample) -> Sample:
    scaled = {
        name: (arr - stats.stats[name][0]) / stats.stats[name][1]
        for name, arr in sample.modalities.items()
    }
    return Sample(id=sample.id, subject=sample.subject, modalities=scaled, labels=sample.labels)


def standardize_all(stats: StandardizationStats, samples: list[Sample]) -> list[Sample]:
    return [apply_standardization(stats, s) for s in samples]


# ---------------------------------------------------------------------------
# subject-exclusive folds


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict[str, int]

    def subjects_in(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f == fold}

    def split(self, samples: list[Sample], fold: int) -> tuple[list[Sample], list[Sample]]:
        """(train, test) for one fold; no subject appears on both sides."""
        test = [s for s in samples if self.assignments[s.subject] == fold]
        train = [s for s in samples if self.assignments[s.subject] != fold]
        return train, test


def subject_folds(subjects, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle of the subject list, then round-robin assignment."""
    if k < 2:
        raise ContractError(f"need at least 2 folds, got {k}")
    subjects = sorted(set(subjects))
    if len(subjects) < k:
        raise ContractError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = Rng(seed).child("folds").permutation(len(subjects))
    return FoldSplit(k=k, assignments={subjects[j]: i % k for i, j in enumerate(order)})


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    """Two-modality generator with three AU families: one family readable from
    each modality alone and one (XOR of a hidden bit per modality) readable
    only jointly."""

    num_aus: int = 12
    subjects: int = 20
    samples_per_subject: int = 100
    alpha_name: str = "alpha"
    beta_name: str = "beta"
    alpha_dim: int = 16
    beta_dim: int = 16
    noise_sigma: float = 0.1
    subject_sigma: float = 0.25

    def __post_init__(self):
        for key in ("num_aus", "subjects", "samples_per_subject", "alpha_dim", "beta_dim"):
            if getattr(self, key) < 1:
                raise ContractError(f"{key} must be positive")
        if self.noise_sigma < 0 or self.subject_sigma < 0:
            raise ContractError("sigmas must be non-negative")


def au_roles(num_aus: int) -> list[str]:
    roles = (ROLE_ALPHA, ROLE_BETA, ROLE_SYNERGY)
    return [roles[k % 3] for k in range(num_aus)]


def synergy_indices(num_aus: int) -> list[int]:
    return [k for k, role in enumerate(au_roles(num_aus)) if role == ROLE_SYNERGY]


def _sign_codebook(rng: Rng, shape) -> np.ndarray:
    return np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)


def synth_generate(spec: SynthSpec, seed: int, out_dir) -> DatasetManifest:
    """Write manifest plus tensor files; identical (spec, seed) pairs produce
    byte-identical trees.

    Per sample, hidden bit vectors a and b (one bit per AU) are drawn
    uniformly. AU k's label is a[k], b[k], or a[k] xor b[k] by family. Each
    modality's features are a fixed +/-1 codebook combination of its own bit
    vector, plus a per-subject offset and isotropic noise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    c = spec.num_aus
    roles = au_roles(c)
    code_a = _sign_codebook(rng.child("codebook/alpha"), (spec.alpha_dim, c))
    code_b = _sign_codebook(rng.child("codebook/beta"), (spec.beta_dim, c))

    modalities = [(spec.alpha_name, (spec.alpha_dim,)), (spec.beta_name, (spec.beta_dim,))]
    rows = []
    for s in range(spec.subjects):
        subject = f"s{s:03d}"
        off_a = rng.child(f"subject/{subject}/alpha").normal((spec.alpha_dim,), std=spec.subject_sigma)
        off_b = rng.child(f"subject/{subject}/beta").normal((spec.beta_dim,), std=spec.subject_sigma)
        for i in range(spec.samples_per_subject):
            sample_id = f"{subject}_{i:04d}"
            draw = rng.child(f"sample/{sample_id}")
            a_bits = draw.bernoulli(0.5, c)
            b_bits = draw.bernoulli(0.5, c)
            labels = np.empty(c)
            for k, role in enumerate(roles):
                if role == ROLE_ALPHA:
                    labels[k] = a_bits[k]
                elif role == ROLE_BETA:
                    labels[k] = b_bits[k]
                else:
                    labels[k] = float(int(a_bits[k]) ^ int(b_bits[k]))
            x_a = code_a @ a_bits + off_a + draw.normal((spec.alpha_dim,), std=spec.noise_sigma)
            x_b = code_b @ b_bits + off_b + draw.normal((spec.beta_dim,), std=spec.noise_sigma)
            paths = (f"{sample_id}.{spec.alpha_name}.bin", f"{sample_id}.{spec.beta_name}.bin")
            for path, arr in zip(paths, (x_a, x_b)):
                (out_dir / path).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            label_str = "".join("1" if v else "0" for v in labels)
            rows.append((sample_id, subject, paths, label_str))

    manifest_path = out_dir / "manifest.txt"
    write_manifest(manifest_path, c, modalities, rows)
    return load_manifest(manifest_path)
