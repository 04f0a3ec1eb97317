"""Style bank: registration by slice-score bin, retrieval, and the wire format.

Bank file layout (little-endian)::

    "A3DB" | version u32 | z_bin f32 | beta 3*f32 | crop 3*u32 | n_clients u32
    per client: id u32 | n_bins u32
      per bin: index i32 | n_styles u32
        per style: z' f32 | block dims 3*u32 | block f32[...]
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ._rng import make_rng
from .errors import FormatError, NotFoundError
from .spectral import DEFAULT_BETA, Beta, StyleSpectrum, block_shape, extract_style, fft3
from .volume import Volume, crop_sub_volume, random_origin, respace

log = logging.getLogger(__name__)

BANK_MAGIC = b"A3DB"
BANK_VERSION = 1
_HEAD = struct.Struct("<4sIf3f3II")
_CLIENT = struct.Struct("<II")
_BIN = struct.Struct("<iI")
_STYLE = struct.Struct("<f3I")

DEFAULT_Z_BIN = 10.0
DEFAULT_CROPS_PER_VOLUME = 4


def _f32(x: float) -> float:
    return float(np.float32(x))


class SliceScoreProvider(Protocol):
    def score_extent(self, v: Volume) -> Tuple[float, float]:
        ...


class StoredExtentProvider:
    """Trusts the ``z_extent`` already attached to each volume."""

    def score_extent(self, v: Volume) -> Tuple[float, float]:
        return v.z_extent


@dataclass(eq=False)
class StyleBank:
    z_bin: float = DEFAULT_Z_BIN
    beta: Beta = DEFAULT_BETA
    crop_size: Tuple[int, int, int] = (32, 32, 32)
    entries: Dict[int, Dict[int, List[StyleSpectrum]]] = field(default_factory=dict)
    # volumes skipped during registration (too small); not serialized
    skipped: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.z_bin <= 0:
            raise ValueError(f"z_bin must be positive, got {self.z_bin}")
        # header fields are f32 on the wire; round now so round trips are exact
        self.z_bin = _f32(self.z_bin)
        self.beta = tuple(_f32(b) for b in self.beta)
        self.crop_size = tuple(int(c) for c in self.crop_size)

    @property
    def block_shape(self) -> Tuple[int, int, int]:
        return block_shape(self.beta, self.crop_size)

    def bin_of(self, slice_score: float) -> int:
        return int(math.floor(slice_score / self.z_bin))

    def styles(self) -> Iterable[Tuple[int, int, StyleSpectrum]]:
        for cid in sorted(self.entries):
            for b in sorted(self.entries[cid]):
                for s in self.entries[cid][b]:
                    yield cid, b, s

    def __len__(self) -> int:
        return sum(1 for _ in self.styles())

    def __eq__(self, other):
        if not isinstance(other, StyleBank):
            return NotImplemented
        if (self.z_bin, self.beta, self.crop_size) != (other.z_bin, other.beta, other.crop_size):
            return False
        if self.entries.keys() != other.entries.keys():
            return False
        for cid, bins in self.entries.items():
            if bins.keys() != other.entries[cid].keys():
                return False
            for b, styles in bins.items():
                if styles != other.entries[cid][b]:
                    return False
        return True

    def add(self, client_id: int, style: StyleSpectrum) -> int:
        """Append a style under ``floor(z'/z_bin)``; returns the bin index."""
        if style.block.shape != self.block_shape:
            raise ValueError(f"style block {style.block.shape} does not match bank block {self.block_shape}")
        if style.slice_score is None:
            raise ValueError("banked styles must record their slice score")
        if not all(math.isclose(a, b, rel_tol=1e-6) for a, b in zip(style.beta, self.beta)):
            raise ValueError(f"style beta {style.beta} does not match bank beta {self.beta}")
        # store the wire-precision beta so a serialization round trip is exact
        style = replace(style, beta=self.beta, slice_score=_f32(style.slice_score))
        b = self.bin_of(style.slice_score)
        self.entries.setdefault(int(client_id), {}).setdefault(b, []).append(style)
        return b


def register_client_styles(
    bank: StyleBank,
    client_id: int,
    train_volumes: Sequence[Volume],
    crops_per_volume: int = DEFAULT_CROPS_PER_VOLUME,
    provider: Optional[SliceScoreProvider] = None,
    rng_seed: int = 0,
    target_spacing=(1.0, 1.0, 1.0),
) -> StyleBank:
    """Register random-crop styles of one client's training volumes.

    Returns a new bank; ``bank`` is left untouched.  Volumes whose metadata
    marks them as anything other than the training split are rejected, and
    volumes smaller than the crop after respacing are skipped with a warning.
    """
    if crops_per_volume < 1:
        raise ValueError(f"crops_per_volume must be >= 1, got {crops_per_volume}")
    provider = provider or StoredExtentProvider()
    out = replace(
        bank,
        entries={c: {b: list(s) for b, s in bins.items()} for c, bins in bank.entries.items()},
        skipped=list(bank.skipped),
    )
    rng = make_rng(rng_seed, "register", client_id)
    for index, v in enumerate(train_volumes):
        split = v.meta.get("split", "train")
        if split != "train":
            raise ValueError(f"volume {v.meta.get('uid', index)} is from split {split!r}; styles come from training data only")
        uid = str(v.meta.get("uid", f"client{client_id}/vol{index}"))
        v = replace(v, z_extent=provider.score_extent(v))
        v = respace(v, target_spacing)
        if any(n < c for n, c in zip(v.shape, out.crop_size)):
            msg = f"skipping {uid}: shape {v.shape} smaller than crop {out.crop_size}"
            log.warning(msg)
            out.skipped.append(msg)
            continue
        for _ in range(crops_per_volume):
            sv = crop_sub_volume(v, random_origin(v.shape, out.crop_size, rng), out.crop_size)
            style = extract_style(fft3(sv), out.beta)
            out.add(client_id, replace(style, slice_score=_f32(sv.slice_score), source=uid))
    return out


def select_style(
    bank: StyleBank,
    requesting_client: int,
    slice_score: Optional[float],
    rng: np.random.Generator,
) -> Tuple[int, int, int]:
    """Pick ``(client, bin, index)`` of a target style.

    With a slice score: a uniformly chosen other client that has the matching
    bin populated; otherwise a uniformly chosen other client's nearest
    populated bin (ties to the lower index); if no other client has styles,
    the requester's own bin.  With ``slice_score=None`` the bin is ignored and
    the style is drawn uniformly from all styles of a random other client.
    """
    populated = {
        cid: {b: s for b, s in bins.items() if s}
        for cid, bins in bank.entries.items()
    }
    populated = {cid: bins for cid, bins in populated.items() if bins}
    if not populated:
        raise NotFoundError("style bank is empty")
    others = sorted(cid for cid in populated if cid != requesting_client)

    if slice_score is None:
        cid = others[rng.integers(len(others))] if others else requesting_client
        flat = [(b, i) for b in sorted(populated[cid]) for i in range(len(populated[cid][b]))]
        b, i = flat[rng.integers(len(flat))]
        return cid, b, i

    want = bank.bin_of(slice_score)
    eligible = [cid for cid in others if want in populated[cid]]
    if eligible:
        cid = eligible[rng.integers(len(eligible))]
    elif others:
        cid = others[rng.integers(len(others))]
    else:
        cid = requesting_client
    bins = populated[cid]
    b = want if want in bins else min(bins, key=lambda k: (abs(k - want), k))
    return cid, b, int(rng.integers(len(bins[b])))


def retrieve_style(
    bank: StyleBank,
    requesting_client: int,
    slice_score: Optional[float],
    rng: np.random.Generator,
) -> StyleSpectrum:
    cid, b, i = select_style(bank, requesting_client, slice_score, rng)
    return bank.entries[cid][b][i]


# -- serialization ---------------------------------------------------------

def serialize_bank(bank: StyleBank) -> bytes:
    parts = [_HEAD.pack(BANK_MAGIC, BANK_VERSION, bank.z_bin, *bank.beta, *bank.crop_size, len(bank.entries))]
    for cid in sorted(bank.entries):
        bins = bank.entries[cid]
        parts.append(_CLIENT.pack(cid, len(bins)))
        for b in sorted(bins):
            parts.append(_BIN.pack(b, len(bins[b])))
            for style in bins[b]:
                parts.append(_STYLE.pack(style.slice_score, *style.block.shape))
                parts.append(np.ascontiguousarray(style.block, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, st: struct.Struct):
        if self.pos + st.size > len(self.buf):
            raise FormatError(f"truncated bank payload at byte {self.pos}")
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out

    def floats(self, n: int) -> np.ndarray:
        end = self.pos + 4 * n
        if end > len(self.buf):
            raise FormatError(f"truncated bank payload at byte {self.pos}")
        arr = np.frombuffer(self.buf[self.pos:end], dtype="<f4").astype(np.float32)
        self.pos = end
        return arr


def deserialize_bank(buf: bytes) -> StyleBank:
    r = _Reader(buf)
    magic, version, z_bin, bh, bw, bd, ch, cw, cd, n_clients = r.take(_HEAD)
    if magic != BANK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}")
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    beta = (bh, bw, bd)
    crop = (ch, cw, cd)
    entries: Dict[int, Dict[int, List[StyleSpectrum]]] = {}
    for _ in range(n_clients):
        cid, n_bins = r.take(_CLIENT)
        bins = entries.setdefault(cid, {})
        for _ in range(n_bins):
            b, n_styles = r.take(_BIN)
            styles = bins.setdefault(b, [])
            for _ in range(n_styles):
                z, h, w, d = r.take(_STYLE)
                block = r.floats(h * w * d).reshape(h, w, d)
                styles.append(StyleSpectrum(block, beta, crop, slice_score=z))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after bank payload")
    return StyleBank(z_bin=z_bin, beta=beta, crop_size=crop, entries=entries)


def bank_size_bytes(bank: StyleBank) -> int:
    size = _HEAD.size
    for bins in bank.entries.values():
        size += _CLIENT.size
        for styles in bins.values():
            size += _BIN.size
            size += sum(_STYLE.size + 4 * s.block.size for s in styles)
    return size


def save_bank(path, bank: StyleBank) -> int:
    payload = serialize_bank(bank)
    Path(path).write_bytes(payload)
    return len(payload)


def load_bank(path) -> StyleBank:
    return deserialize_bank(Path(path).read_bytes())
