from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def to_batch(images) -> torch.Tensor:
    """NHWC (or a single HWC) numpy array -> NCHW float32 tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def to_images(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float64 numpy array."""
    return t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(model: torch.nn.Module) -> int:
    """Number of learnable scalars, frozen or not (batch-norm running stats excluded)."""
    return sum(p.numel() for p in model.parameters())


def batches(n: int, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = True):
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2 and n >= 2:
            # batch-norm cannot train on a single sample
            continue
        yield idx
