"""Datasets, augmentation and checkpoint files."""
from dataclasses import dataclass
import json
import os
import struct

import numpy as np

from .arch import ArchSpec
from .errors import CheckpointError, ConfigError, FormatError
from .rng import CounterRNG

CIFAR_PIXELS = 3 * 32 * 32
CHECKPOINT_MAGIC = b"IGCCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64, already normalised
    labels: np.ndarray  # (N,) int64
    class_count: int
    mean: np.ndarray  # per-channel constants used for normalisation
    std: np.ndarray
    templates: np.ndarray = None  # synthetic data only

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def pad_value(self):
        """Normalised value of a zero (black) pixel, per channel."""
        return -self.mean / self.std

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.mean, self.std, self.templates)


# -- CIFAR binary ------------------------------------------------------------

def _parse_cifar(blob, label_bytes, class_count, name):
    record = label_bytes + CIFAR_PIXELS
    if len(blob) % record:
        whole = len(blob) // record
        raise FormatError(f"{name}: truncated record {whole} ({len(blob) - whole * record} of {record} bytes)",
                          offset=whole * record)
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    bad = np.nonzero(labels >= class_count)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{name}: label {labels[i]} >= class count {class_count}",
                          offset=i * record + label_bytes - 1)
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar_binary(paths, class_count=10, label_bytes=None, normalization=None):
    """Read CIFAR-10/100 binary batches.

    Each record is the label byte(s) then 3072 pixel bytes, planes R, G, B
    in row-major order.  CIFAR-100 records carry coarse then fine label; the
    fine one is used.  Pixels go to [0, 1] and are normalised per channel by
    ``normalization=(mean, std)`` or, when omitted, by the statistics of the
    files being read.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if label_bytes is None:
        label_bytes = 2 if class_count == 100 else 1
    pix, labs = [], []
    for path in paths:
        with open(path, "rb") as fh:
            p, l = _parse_cifar(fh.read(), label_bytes, class_count, os.fspath(path))
        pix.append(p)
        labs.append(l)
    pixels = np.concatenate(pix) if pix else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate(labs) if labs else np.zeros(0, np.int64)
    images = pixels.astype(np.float64) / 255.0
    if normalization is None:
        if len(images):
            mean = images.mean(axis=(0, 2, 3))
            std = images.std(axis=(0, 2, 3))
            std = np.where(std > 0, std, 1.0)
        else:
            mean, std = np.zeros(3), np.ones(3)
    else:
        mean, std = (np.asarray(v, dtype=np.float64) for v in normalization)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels, class_count, mean, std)


def write_cifar_binary(path, pixels, labels, coarse_labels=None):
    """Write uint8 (N, 3, 32, 32) pixels in the CIFAR record layout."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None], pixels]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    with open(path, "wb") as fh:
        fh.write(np.hstack(cols).tobytes())


# -- augmentation ------------------------------------------------------------

def crop_and_flip(images, offsets, flips, pad=4, fill=0.0):
    """Pad by ``pad`` with ``fill``, crop back to the input size at ``offsets``
    (row, col into the padded image), then mirror where ``flips`` is set."""
    n, c, h, w = images.shape
    fill = np.broadcast_to(np.asarray(fill, dtype=images.dtype), (c,))
    padded = np.empty((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:] = fill[None, :, None, None]
    padded[:, :, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = int(offsets[i][0]), int(offsets[i][1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def augment(images, rng, pad=4, fill=0.0):
    """Random pad-and-crop plus a horizontal flip with probability 1/2.

    ``fill`` is the padding value; pass ``Dataset.pad_value()`` so padding
    on normalised images matches zero-padding before normalisation.
    """
    n, _, h, w = images.shape
    if h != w:
        raise ConfigError(f"augmentation expects square images, got {h}x{w}")
    offsets = rng.integers(2 * pad + 1, (n, 2))
    flips = rng.uniform(n) < 0.5
    return crop_and_flip(images, offsets, flips, pad, fill)


# -- synthetic data ----------------------------------------------------------

def synth_templates(seed, n_classes, hw, channels=3):
    return CounterRNG(seed, "synth", "templates").normal((n_classes, channels, hw, hw))


def synth_dataset(seed, n_classes=10, n_per_class=20, hw=16, sigma=0.3, split="train", channels=3):
    """Template-plus-noise classes.

    Class c is a fixed standard-normal template image; each sample adds
    Gaussian noise with standard deviation ``sigma`` times the template's
    own std.  Templates depend only on ``seed``; the noise also depends on
    ``split``, so train and test share classes but not samples.
    """
    templates = synth_templates(seed, n_classes, hw, channels)
    rng = CounterRNG(seed, "synth", split)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    scale = templates.reshape(n_classes, -1).std(axis=1)
    noise = rng.normal((len(labels), channels, hw, hw))
    images = templates[labels] + sigma * scale[labels, None, None, None] * noise
    order = rng.child("order").permutation(len(labels))
    return Dataset(images[order], labels[order].astype(np.int64), n_classes,
                   np.zeros(channels), np.ones(channels), templates)


def nearest_template_predict(images, templates):
    flat = images.reshape(len(images), -1)
    t = templates.reshape(len(templates), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ t.T + (t ** 2).sum(1)[None, :]
    return d.argmin(axis=1)


def nearest_template_accuracy(dataset, templates=None):
    templates = dataset.templates if templates is None else templates
    return float((nearest_template_predict(dataset.images, templates) == dataset.labels).mean())


# -- checkpoints -------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then the tensor blob.  The header records the version, the ArchSpec and its
# sha256, the precision and a manifest of (name, shape, dtype, offset, nbytes).

_BLOB_DTYPES = {"single": "<f4", "double": "<f8"}


def save_checkpoint(net, path, meta=None):
    """Write ``net``; ``meta`` is a JSON-serialisable dict kept in the header."""
    dtype = _BLOB_DTYPES[net.precision]
    manifest, chunks, offset = [], [], 0
    for name, arr in net.state_arrays():
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                         "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch.to_dict(),
        "arch_hash": net.arch.hash(),
        "precision": net.precision,
        "tensors": manifest,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_checkpoint_header(blob):
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic string")
    if len(blob) < 12:
        raise CheckpointError("checkpoint truncated inside the header length")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + n].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    if arch.hash() != header.get("arch_hash"):
        raise CheckpointError("architecture hash mismatch: header is corrupt or was edited")
    return header, arch, 12 + n


def load_checkpoint(path, expected_arch=None):
    from .network import build_network

    with open(path, "rb") as fh:
        blob = fh.read()
    header, arch, start = read_checkpoint_header(blob)
    if expected_arch is not None and expected_arch.hash() != arch.hash():
        raise CheckpointError("checkpoint was written for a different architecture")
    net = build_network(arch, precision=header["precision"])
    slots = {name: arr for name, arr in net.state_arrays()}
    if set(slots) != {t["name"] for t in header["tensors"]}:
        raise CheckpointError("tensor manifest does not match the architecture")
    for t in header["tensors"]:
        target = slots[t["name"]]
        lo = start + t["offset"]
        raw = blob[lo:lo + t["nbytes"]]
        if len(raw) != t["nbytes"] or list(target.shape) != t["shape"]:
            raise CheckpointError(f"tensor {t['name']} is truncated or has the wrong shape")
        target[...] = np.frombuffer(raw, dtype=t["dtype"]).reshape(target.shape)
    net.meta = header.get("meta", {})
    return net
