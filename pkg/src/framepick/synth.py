"""Planted-keyframe synthetic video-QA generator.

Each sample is a question about one attribute of a synthetic video. K
keyframes carry the patterns of K distinct attributes (one attribute per
keyframe, values drawn independently) plus a shared marker pattern; the
question asks about one of the attributes present, so exactly one keyframe
answers it and the correct answer is decodable only from the keyframe set.
Spreading the attributes across keyframes keeps every keyframe individually
load-bearing: a learned selector is rewarded for recovering all of them, not
just any one. Distractor frames are noise, and roughly half additionally
carry a decoy pattern (an attribute present in the video, uniformly random
value, no marker) so blind uniform sampling is actively penalized rather
than merely diluted.

All patterns and the marker are mutually orthogonal, so the built-in decoder
(correlate-and-argmax over the queried attribute's tagged patterns,
max-pooled over the frames it is allowed to read) recovers the answer from
the keyframes with a wide margin. Generation is deterministic: every sample
derives its own stream from (seed, split, index).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PLACEMENTS = ("one_per_segment", "uniform_random", "clustered")

# token layout inside the shared vocabulary
TOK_PAD = 0
TOK_ATTR_BASE = 10
TOK_VALUE_BASE = 32


@dataclass
class DatasetSpec:
    num_train: int = 4000
    num_val: int = 1000
    frames: int = 32          # T
    patches: int = 4          # N
    raw_dim: int = 24
    num_choices: int = 4      # A
    num_keyframes: int = 4    # K
    num_attributes: int = 4
    noise_std: float = 0.3
    decoy_prob: float = 0.5
    keyframe_placement: str = "one_per_segment"
    seed: int = 0

    def __post_init__(self):
        if self.num_keyframes > self.frames:
            raise ValueError("K must not exceed T")
        if self.num_train < 1 or self.num_val < 1:
            raise ValueError("split counts must be at least 1")
        if self.keyframe_placement not in PLACEMENTS:
            raise ValueError(f"unknown keyframe placement {self.keyframe_placement!r}")
        if self.keyframe_placement == "one_per_segment" and self.frames % self.num_keyframes != 0:
            raise ValueError("one_per_segment needs K to divide T")
        if self.num_attributes < self.num_keyframes:
            raise ValueError("need at least one attribute per keyframe (num_attributes >= K)")
        if TOK_VALUE_BASE + self.num_choices > 64 or TOK_ATTR_BASE + self.num_attributes > TOK_VALUE_BASE:
            raise ValueError("token layout overflows the 64-token vocabulary")


@dataclass
class SynthSample:
    raw_video: np.ndarray      # [T, N, raw_dim], float64 holding float32-exact values
    question: np.ndarray       # [Lq] int token ids
    choices: np.ndarray        # [A, Lc] int token ids
    answer_idx: int
    keyframes: tuple           # sorted frame indices
    attribute: int             # queried attribute
    value: int                 # its value in this video (the correct answer)
    keyframe_attrs: tuple      # attribute carried by each keyframe, in keyframe order
    keyframe_values: tuple     # value carried by each keyframe
    seed: int


class PatternBank:
    """Fixed pattern dictionary shared by every sample of a spec.

    patterns[a, v] is the [N, raw_dim] pattern for value v of attribute a,
    constant across the N patches so every patch token of a marked frame
    carries the full signature; `marker` is the keyframe tag. All pattern
    vectors and the marker are mutually orthogonal in raw-feature space,
    each with squared norm raw_dim per patch.
    """

    def __init__(self, spec: DatasetSpec):
        count = spec.num_attributes * spec.num_choices
        if spec.raw_dim < count + 1:
            raise ValueError(f"raw_dim {spec.raw_dim} too small for {count} orthogonal patterns plus a marker")
        rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((spec.seed, 0xBA17))))
        q, _ = np.linalg.qr(rng.normal(size=(spec.raw_dim, count)))
        basis = q.T * np.sqrt(spec.raw_dim)
        self.patterns = np.stack([
            np.stack([_f32_exact(np.tile(basis[a * spec.num_choices + v], (spec.patches, 1)))
                      for v in range(spec.num_choices)])
            for a in range(spec.num_attributes)])
        # marker rows vary per patch inside the orthocomplement of the pattern
        # span, so channel pooling keeps a distinctive per-frame signature
        raw_marker = rng.normal(size=(spec.patches, spec.raw_dim))
        raw_marker -= (raw_marker @ q) @ q.T
        raw_marker *= np.sqrt(spec.raw_dim) / np.linalg.norm(raw_marker, axis=1, keepdims=True)
        self.marker = _f32_exact(raw_marker)


def _f32_exact(x: np.ndarray) -> np.ndarray:
    """Round through float32 so in-memory values match the export format."""
    return x.astype(np.float32).astype(np.float64)


def _place_keyframes(spec: DatasetSpec, rng: np.random.Generator) -> tuple:
    t, k = spec.frames, spec.num_keyframes
    if spec.keyframe_placement == "one_per_segment":
        seg = t // k
        picks = [int(s * seg + rng.integers(seg)) for s in range(k)]
    elif spec.keyframe_placement == "uniform_random":
        picks = sorted(int(i) for i in rng.choice(t, size=k, replace=False))
    else:  # clustered: K consecutive frames
        start = int(rng.integers(t - k + 1))
        picks = list(range(start, start + k))
    return tuple(sorted(picks))


def _make_sample(spec: DatasetSpec, bank: PatternBank, split: int, index: int) -> SynthSample:
    ss = np.random.SeedSequence((spec.seed, split, index))
    rng = np.random.default_rng(np.random.PCG64(ss))
    sample_seed = int(ss.generate_state(1)[0])

    kf_attrs = tuple(int(a) for a in rng.choice(spec.num_attributes, size=spec.num_keyframes,
                                                replace=False))
    kf_values = tuple(int(v) for v in rng.integers(spec.num_choices, size=spec.num_keyframes))
    queried = int(rng.integers(spec.num_keyframes))
    attr, value = kf_attrs[queried], kf_values[queried]
    keyframes = _place_keyframes(spec, rng)

    video = rng.normal(size=(spec.frames, spec.patches, spec.raw_dim)) * spec.noise_std
    slot = {f: j for j, f in enumerate(keyframes)}
    for f in range(spec.frames):
        if f in slot:
            j = slot[f]
            video[f] += bank.patterns[kf_attrs[j], kf_values[j]] + bank.marker
        elif rng.random() < spec.decoy_prob:
            decoy_attr = kf_attrs[int(rng.integers(spec.num_keyframes))]
            video[f] += bank.patterns[decoy_attr, int(rng.integers(spec.num_choices))]
    video = _f32_exact(video)

    perm = rng.permutation(spec.num_choices)
    answer_idx = int(np.flatnonzero(perm == value)[0])
    question = np.array([TOK_ATTR_BASE + attr], dtype=np.int64)
    choices = np.array([[TOK_VALUE_BASE + int(v)] for v in perm], dtype=np.int64)

    return SynthSample(raw_video=video, question=question, choices=choices,
                       answer_idx=answer_idx, keyframes=keyframes,
                       attribute=attr, value=value,
                       keyframe_attrs=kf_attrs, keyframe_values=kf_values,
                       seed=sample_seed)


def decode_sample(sample: SynthSample, bank: PatternBank, frame_indices=None) -> int:
    """The generator's own decoder, restricted to `frame_indices` (defaults
    to the planted keyframes): correlate each readable frame against the
    queried attribute's tagged patterns, max-pool, argmax the value."""
    attr = int(sample.question[0] - TOK_ATTR_BASE)
    frames = sample.keyframes if frame_indices is None else tuple(frame_indices)
    if len(frames) == 0:
        raise ValueError("decoder needs at least one readable frame")
    content = sample.raw_video[list(frames)].reshape(len(frames), -1)
    refs = (bank.patterns[attr] + bank.marker[None]).reshape(bank.patterns.shape[1], -1)
    scores = (content @ refs.T).max(axis=0)  # [A], max over readable frames
    value = int(scores.argmax())
    choice_values = sample.choices[:, 0] - TOK_VALUE_BASE
    return int(np.flatnonzero(choice_values == value)[0])


def generate(spec: DatasetSpec):
    """Build (train, val) sample lists; bitwise reproducible from the spec.

    Every sample is verified against the built-in decoder at generation
    time, so a spec whose noise or patterns break decodability fails fast.
    """
    bank = PatternBank(spec)
    train = [_make_sample(spec, bank, 0, i) for i in range(spec.num_train)]
    val = [_make_sample(spec, bank, 1, i) for i in range(spec.num_val)]
    for split in (train, val):
        for s in split:
            if decode_sample(s, bank) != s.answer_idx:
                raise AssertionError("generator self-check failed: keyframes do not decode the answer")
    return train, val


def oracle_accuracy(strategy: str, dataset, spec: DatasetSpec, k: int,
                    bank: PatternBank | None = None, seed: int = 0) -> float:
    """Decoder accuracy when restricted to frames chosen by a strategy."""
    if k > spec.frames:
        raise ValueError("k must not exceed the frame count")
    bank = bank or PatternBank(spec)
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, 0xACC))))
    hits = 0
    for sample in dataset:
        if strategy == "keyframe_oracle":
            frames = sample.keyframes[:k] if k < len(sample.keyframes) else sample.keyframes
        elif strategy == "uniform_k":
            frames = uniform_frame_indices(spec.frames, k)
        elif strategy == "random_k":
            frames = sorted(int(i) for i in rng.choice(spec.frames, size=k, replace=False))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        hits += decode_sample(sample, bank, frames) == sample.answer_idx
    return hits / len(dataset)


def uniform_frame_indices(t: int, k: int) -> tuple:
    """Evenly spaced frame picks, one per stride midpoint."""
    return tuple(int((i + 0.5) * t / k) for i in range(k))


def expected_uniform_keyframe_hits(spec: DatasetSpec, k: int) -> float:
    """Exact expected |uniform picks  intersect  keyframes| / K, enumerated over
    every keyframe placement the spec admits."""
    picks = set(uniform_frame_indices(spec.frames, k))
    t, kf = spec.frames, spec.num_keyframes
    if spec.keyframe_placement == "one_per_segment":
        seg = t // kf
        total = 0.0
        for s in range(kf):
            positions = range(s * seg, (s + 1) * seg)
            total += sum(p in picks for p in positions) / seg
        return total / kf
    if spec.keyframe_placement == "uniform_random":
        # each frame is a keyframe with probability K/T by symmetry
        return len(picks) / t
    # clustered: enumerate every start offset
    starts = t - kf + 1
    total = 0.0
    for start in range(starts):
        block = set(range(start, start + kf))
        total += len(block & picks) / kf
    return total / starts


# ---------------------------------------------------------------------------
# on-disk format: JSON manifest + one little-endian float32 blob per split

def _spec_canonical(spec: DatasetSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True, separators=(",", ":"))


def dataset_digest(directory) -> str:
    directory = Path(directory)
    h = hashlib.sha256()
    for name in ("manifest.json", "train.f32", "val.f32"):
        h.update(hashlib.sha256((directory / name).read_bytes()).digest())
    return h.hexdigest()


def save_dataset(directory, spec: DatasetSpec, train, val, force: bool = False) -> None:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)

    manifest = {"spec": asdict(spec), "splits": {}}
    for name, samples in (("train", train), ("val", val)):
        blob = directory / f"{name}.f32"
        with open(blob, "wb") as fh:
            for s in samples:
                fh.write(s.raw_video.astype("<f4").tobytes())
        manifest["splits"][name] = {
            "file": blob.name,
            "count": len(samples),
            "video_shape": [spec.frames, spec.patches, spec.raw_dim],
            "samples": [{
                "question": s.question.tolist(),
                "choices": s.choices.tolist(),
                "answer_idx": s.answer_idx,
                "keyframes": list(s.keyframes),
                "attribute": s.attribute,
                "value": s.value,
                "keyframe_attrs": list(s.keyframe_attrs),
                "keyframe_values": list(s.keyframe_values),
                "seed": s.seed,
            } for s in samples],
        }
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    tmp.rename(manifest_path)


def load_dataset(directory):
    """Read a dataset directory back: returns (spec, train, val)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    out = {}
    for name in ("train", "val"):
        meta = manifest["splits"][name]
        shape = tuple(meta["video_shape"])
        per = int(np.prod(shape))
        flat = np.frombuffer((directory / meta["file"]).read_bytes(), dtype="<f4")
        if flat.size != per * meta["count"]:
            raise ValueError(f"{name} blob size does not match the manifest")
        videos = flat.astype(np.float64).reshape(meta["count"], *shape)
        samples = []
        for i, m in enumerate(meta["samples"]):
            samples.append(SynthSample(
                raw_video=videos[i],
                question=np.array(m["question"], dtype=np.int64),
                choices=np.array(m["choices"], dtype=np.int64),
                answer_idx=int(m["answer_idx"]),
                keyframes=tuple(m["keyframes"]),
                attribute=int(m["attribute"]),
                value=int(m["value"]),
                keyframe_attrs=tuple(m["keyframe_attrs"]),
                keyframe_values=tuple(m["keyframe_values"]),
                seed=int(m["seed"]),
            ))
        out[name] = samples
    return spec, out["train"], out["val"]
