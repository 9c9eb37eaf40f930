"""A small manually differentiated sequence classifier.

Architecture: an embedding table feeds L residual MLP blocks, each block
two bias-free linear layers (d_model -> 4 d_model -> d_model) with a tanh
in between, added back to the block input; a linear head maps the final
state to vocabulary logits. The feature map exposed for distillation at
block l is that block's residual output.

Position i sees the sum of two embeddings, its own token and the previous
one (position 0 pairs with token id 0). The model is otherwise strictly
per-position, so this input encoding is what lets a per-position classifier
solve targets that depend on adjacent-token context.

Parameters live in a flat name -> float32 ndarray dict. The block weights
are the prunable set by default; embeddings and head can be pruned on
request but are left dense otherwise. Masked weights are exactly zero and
backward() re-freezes their gradients, so sparsity survives any number of
optimizer steps.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import pruning, tensor


@dataclass
class TinyModelConfig:
    vocab: int = 32
    d_model: int = 64
    blocks: int = 2
    seq: int = 16
    expansion: int = 4

    def __post_init__(self):
        if min(self.vocab, self.d_model, self.blocks, self.seq, self.expansion) < 1:
            raise ValueError("all model dims must be positive")
        if self.d_model % 4 != 0:
            raise ValueError(f"d_model must be divisible by 4, got {self.d_model}")


class TinyModel:
    def __init__(self, config, params, masks=None):
        self.config = config
        self.params = params
        self.masks = masks if masks is not None else {}

    @classmethod
    def init(cls, config, gen):
        d = config.d_model
        h = config.expansion * d
        p = {"emb": gen.standard_normal((config.vocab, d), dtype=np.float32)}
        for l in range(config.blocks):
            p[f"block{l}.w1"] = gen.standard_normal((d, h), dtype=np.float32) * np.float32(d**-0.5)
            p[f"block{l}.w2"] = gen.standard_normal((h, d), dtype=np.float32) * np.float32(h**-0.5)
        p["head"] = gen.standard_normal((d, config.vocab), dtype=np.float32) * np.float32(d**-0.5)
        return cls(config, p)

    @property
    def prunable(self):
        names = []
        for l in range(self.config.blocks):
            names += [f"block{l}.w1", f"block{l}.w2"]
        return names

    def copy(self):
        return TinyModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.masks.items()},
        )

    def astype(self, dtype):
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def forward(self, inputs):
        """Run the model. Returns (logits, feature maps, cache for backward)."""
        inputs = np.asarray(inputs)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be (B, seq), got shape {inputs.shape}")
        if int(inputs.max()) >= self.config.vocab or int(inputs.min()) < 0:
            raise ValueError("token id out of range")
        prev = np.concatenate([np.zeros((inputs.shape[0], 1), dtype=inputs.dtype), inputs[:, :-1]], axis=1)
        emb = self.params["emb"]
        h = emb[inputs] + emb[prev]
        cache = {"inputs": inputs, "prev": prev, "h_in": [], "t": []}
        feats = []
        for l in range(self.config.blocks):
            cache["h_in"].append(h)
            a = h @ self.params[f"block{l}.w1"]
            t = np.tanh(a)
            cache["t"].append(t)
            h = h + t @ self.params[f"block{l}.w2"]
            feats.append(h)
        cache["h_out"] = h
        logits = h @ self.params["head"]
        return logits, feats, cache

    def backward(self, cache, grad_logits, grad_features=None):
        """Exact reverse-mode gradients for every parameter.

        grad_features, when given, is one array per block (gradients with
        respect to the block residual outputs); masked parameters get their
        gradients frozen to zero.
        """
        L = self.config.blocks
        grad_logits = np.asarray(grad_logits)
        h_out = cache["h_out"]
        d = self.config.d_model
        v = self.config.vocab
        grads = {}
        grads["head"] = h_out.reshape(-1, d).T @ grad_logits.reshape(-1, v)
        dh = grad_logits @ self.params["head"].T
        for l in reversed(range(L)):
            if grad_features is not None and l < len(grad_features) and grad_features[l] is not None:
                dh = dh + grad_features[l]
            t = cache["t"][l]
            h_in = cache["h_in"][l]
            w1 = self.params[f"block{l}.w1"]
            w2 = self.params[f"block{l}.w2"]
            hdim = t.shape[-1]
            grads[f"block{l}.w2"] = t.reshape(-1, hdim).T @ dh.reshape(-1, d)
            dt = dh @ w2.T
            da = dt * (1.0 - t * t)
            grads[f"block{l}.w1"] = h_in.reshape(-1, d).T @ da.reshape(-1, hdim)
            dh = dh + da @ w1.T
        demb = np.zeros_like(self.params["emb"])
        np.add.at(demb, cache["inputs"], dh)
        np.add.at(demb, cache["prev"], dh)
        grads["emb"] = demb
        for name, mask in self.masks.items():
            grads[name] = pruning.freeze_mask(grads[name], mask)
        return grads

    def install_mask(self, name, mask):
        """Zero the dropped weights of one parameter and remember the mask."""
        w = self.params[name]
        if mask.shape != w.shape:
            raise ValueError(f"mask shape {mask.shape} != {name} shape {w.shape}")
        w[~mask] = 0
        self.masks[name] = mask

    def prune_to(self, sparsity, names=None):
        """Magnitude-prune each prunable layer to the target sparsity."""
        for name in names or self.prunable:
            pruned, mask = pruning.magnitude_prune(self.params[name], sparsity)
            self.params[name] = pruned
            self.masks[name] = mask

    def prune_to_nm(self, pattern, names=None):
        for name in names or self.prunable:
            pruned, mask = pruning.nm_project(self.params[name], pattern)
            self.params[name] = pruned
            self.masks[name] = mask

    def prunable_sparsity(self):
        """Fraction of exactly-zero weights over the prunable layers."""
        total = sum(self.params[n].size for n in self.prunable)
        nnz = sum(int(np.count_nonzero(self.params[n])) for n in self.prunable)
        return 1.0 - nnz / total


def save_checkpoint(dirpath, model):
    """One .skdm file per parameter, .skbm masks, and a json manifest."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "config": vars(model.config),
        "params": {},
        "masks": {},
    }
    for name, w in model.params.items():
        fname = name.replace(".", "_") + ".skdm"
        tensor.save_skdm(os.path.join(dirpath, fname), w)
        manifest["params"][name] = {"file": fname, "shape": list(w.shape)}
    for name, mask in model.masks.items():
        fname = name.replace(".", "_") + ".skbm"
        pruning.save_skbm(os.path.join(dirpath, fname), mask)
        manifest["masks"][name] = fname
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(dirpath):
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    config = TinyModelConfig(**manifest["config"])
    params = {}
    for name, entry in manifest["params"].items():
        w = tensor.load_skdm(os.path.join(dirpath, entry["file"]))
        if list(w.shape) != entry["shape"]:
            raise tensor.FormatError(f"{name}: shape {list(w.shape)} != manifest {entry['shape']}")
        params[name] = w
    masks = {}
    for name, fname in manifest.get("masks", {}).items():
        masks[name] = pruning.load_skbm(os.path.join(dirpath, fname))
    return TinyModel(config, params, masks)
