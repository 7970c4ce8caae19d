"""Parameter containers, initialisers and checkpoint I/O."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from satfuse.errors import CheckpointError, FormatError
from satfuse.tensor import Tensor, tsr


class ParamStore(dict):
    """Ordered ``name -> Tensor`` mapping of learnable parameters."""

    def add(self, name: str, value: np.ndarray, dtype=np.float32) -> Tensor:
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out.add(k, v.data, dtype=dtype)
        return out

    def sub(self, prefix: str) -> dict:
        """View of the entries under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def n_params(self) -> int:
        return int(sum(p.size for p in self.values()))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_param(store: ParamStore, rng, name: str, c_out: int, c_in: int, k: int, zero: bool = False, dtype=np.float32):
    shape = (c_out, c_in, k, k)
    w = np.zeros(shape) if zero else uniform_fan_in(rng, shape, c_in * k * k)
    store.add(f"{name}.w", w, dtype)
    store.add(f"{name}.b", np.zeros(c_out), dtype)


def linear_param(store: ParamStore, rng, name: str, d_in: int, d_out: int, bias: bool = True, dtype=np.float32):
    store.add(f"{name}.w", uniform_fan_in(rng, (d_in, d_out), d_in), dtype)
    if bias:
        store.add(f"{name}.b", np.zeros(d_out), dtype)


def save_checkpoint(out_dir, params: ParamStore, config: dict, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, t in params.items():
        fname = name.replace("/", "_") + ".tsr"
        tsr.save(out / fname, t.data)
        files[name] = fname
    manifest = {"format": "satfuse-ckpt-1", "params": files, "config": config, "digest": params.digest()}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_checkpoint(in_dir) -> tuple[ParamStore, dict, dict]:
    """Returns ``(params, config, manifest)``."""
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
        files = manifest["params"]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest in {src}: {exc}") from exc
    store = ParamStore()
    for name, fname in files.items():
        try:
            arr = tsr.load(src / fname)
        except (OSError, FormatError) as exc:
            raise CheckpointError(f"cannot load parameter {name}: {exc}") from exc
        store.add(name, arr, dtype=arr.dtype)
    return store, manifest.get("config", {}), manifest
