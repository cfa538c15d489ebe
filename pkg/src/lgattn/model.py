"""Two-tower frame-sequence classifier and its training loop.

One transformer block per modality (attention variant + feed-forward +
layer-norm, residual connections), fusion by concatenation and temporal
averaging over the valid frames, a hidden layer, and per-class logits.
Sigmoid lives in the loss and the metrics, not in the model.
"""

import copy
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics
from .attention import (GateAttParams, GateOpParams, MhsaParams, VariantConfig,
                        attention_forward, check_variant, init_gate_att,
                        init_gate_op, init_mhsa, uniform_init)
from .data import batch_and_pad
from .masks import parse_mask_spec
from .tensor import (Tensor, add, bce_with_logits, concat_cols, layer_norm,
                     matmul, mean_rows, relu, sigmoid)

CHECKPOINT_MAGIC = b"LATN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    max_frames: int = 32
    d_visual: int = 32
    d_audio: int = 16
    heads: int = 4
    variant: str = "baseline"
    mask_spec: str | None = None
    ff_mult: int = 4
    hidden_dim: int | None = None
    num_classes: int = 20
    depth: int = 1

    def resolved_hidden(self):
        return self.hidden_dim or (self.d_visual + self.d_audio)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 64
    eval_every: int = 200
    early_stop_patience: int = 5
    lr_factor: float = 0.1
    lr_patience: int = 3
    max_iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "eval_every", "early_stop_patience",
                     "lr_factor", "lr_patience", "max_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train config field {name} must be positive")


def _variant_config(cfg):
    if cfg.variant == "baseline":
        return VariantConfig(mode="baseline")
    if cfg.mask_spec is None:
        raise ValueError(f"variant {cfg.variant!r} needs a mask spec")
    masks = parse_mask_spec(cfg.mask_spec, cfg.max_frames)
    if cfg.variant == "local":
        if len(masks) != 1:
            raise ValueError("local variant takes exactly one mask")
        return VariantConfig(mode="local", mask=masks[0])
    if cfg.variant == "share_att":
        if len(masks) == 1:
            masks = masks * (cfg.heads // 2)
        return VariantConfig(mode="share_att", local_masks=masks)
    if cfg.variant in ("gate_att", "gate_op"):
        if len(masks) != 1:
            raise ValueError(f"{cfg.variant} takes exactly one mask")
        return VariantConfig(mode=cfg.variant, mask=masks[0])
    raise ValueError(f"unknown variant {cfg.variant!r}")


class Block:
    """Attention + feed-forward sub-layers with residuals and layer-norm."""

    def __init__(self, d, t, variant_cfg, heads, ff_mult, rng):
        self.cfg = variant_cfg
        self.attn = init_mhsa(d, heads, rng)
        self.gate_att = init_gate_att(t, rng) if variant_cfg.mode == "gate_att" else None
        self.gate_op = init_gate_op(d, rng) if variant_cfg.mode == "gate_op" else None
        ff = ff_mult * d
        self.ln1_g = Tensor(np.ones(d), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_g = Tensor(np.ones(d), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d), requires_grad=True)
        self.ff_w1 = uniform_init(rng, d, ff)
        self.ff_b1 = Tensor(np.zeros(ff), requires_grad=True)
        self.ff_w2 = uniform_init(rng, ff, d)
        self.ff_b2 = Tensor(np.zeros(d), requires_grad=True)

    def forward(self, x, valid_len):
        a, maps = attention_forward(x, self.attn, self.cfg,
                                    self.gate_att, self.gate_op, valid_len)
        h = layer_norm(add(x, a), self.ln1_g, self.ln1_b)
        f = add(matmul(relu(add(matmul(h, self.ff_w1), self.ff_b1)),
                       self.ff_w2), self.ff_b2)
        y = layer_norm(add(h, f), self.ln2_g, self.ln2_b)
        return y, maps

    def parameters(self, prefix):
        out = []
        for i in range(self.attn.heads):
            out += [(f"{prefix}.wq{i}", self.attn.w_q[i]),
                    (f"{prefix}.wk{i}", self.attn.w_k[i]),
                    (f"{prefix}.wv{i}", self.attn.w_v[i])]
        out.append((f"{prefix}.wo", self.attn.w_o))
        if self.gate_att is not None:
            out += [(f"{prefix}.ga_wg", self.gate_att.w_gate_global),
                    (f"{prefix}.ga_wl", self.gate_att.w_gate_local)]
        if self.gate_op is not None:
            out += [(f"{prefix}.go_og", self.gate_op.w_out_global),
                    (f"{prefix}.go_ol", self.gate_op.w_out_local),
                    (f"{prefix}.go_wg", self.gate_op.w_gate_global),
                    (f"{prefix}.go_wl", self.gate_op.w_gate_local)]
        out += [(f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b),
                (f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b),
                (f"{prefix}.ff_w1", self.ff_w1), (f"{prefix}.ff_b1", self.ff_b1),
                (f"{prefix}.ff_w2", self.ff_w2), (f"{prefix}.ff_b2", self.ff_b2)]
        return out


class Model:
    """Visual + audio encoder towers with a shared classification head."""

    def __init__(self, cfg: EncoderConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        vc = _variant_config(cfg)
        check_variant(vc, cfg.heads, cfg.max_frames)
        self.towers = {
            "visual": [Block(cfg.d_visual, cfg.max_frames, vc, cfg.heads,
                             cfg.ff_mult, rng) for _ in range(cfg.depth)],
            "audio": [Block(cfg.d_audio, cfg.max_frames, vc, cfg.heads,
                            cfg.ff_mult, rng) for _ in range(cfg.depth)],
        }
        d_cat = cfg.d_visual + cfg.d_audio
        hidden = cfg.resolved_hidden()
        self.hidden_w = uniform_init(rng, d_cat, hidden)
        self.hidden_b = Tensor(np.zeros(hidden), requires_grad=True)
        self.out_w = uniform_init(rng, hidden, cfg.num_classes)
        self.out_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)

    def parameters(self):
        out = []
        for name, blocks in self.towers.items():
            for i, b in enumerate(blocks):
                out += b.parameters(f"{name}.block{i}")
        out += [("head.hidden_w", self.hidden_w), ("head.hidden_b", self.hidden_b),
                ("head.out_w", self.out_w), ("head.out_b", self.out_b)]
        return out

    def encode_modality(self, x, valid_len, modality, collect_maps=False):
        """Run one tower; x is a Tensor of shape T x D (padded to max_frames)."""
        if valid_len < 1:
            raise ValueError("valid_len must be >= 1")
        if x.shape[0] != self.cfg.max_frames:
            raise ValueError(f"expected {self.cfg.max_frames} rows, got {x.shape[0]}")
        all_maps = []
        for block in self.towers[modality]:
            x, maps = block.forward(x, valid_len)
            if collect_maps:
                all_maps.append(maps)
        return (x, all_maps) if collect_maps else x

    def fuse_and_classify(self, y_v, y_a, valid_len):
        """Concat towers, average the valid frames, hidden layer, logits."""
        pooled = mean_rows(concat_cols([y_v, y_a]), valid_len)
        h = relu(add(matmul(pooled, self.hidden_w), self.hidden_b))
        return add(matmul(h, self.out_w), self.out_b)

    def forward(self, visual, audio, valid_len):
        y_v = self.encode_modality(as_tensor(visual), valid_len, "visual")
        y_a = self.encode_modality(as_tensor(audio), valid_len, "audio")
        return self.fuse_and_classify(y_v, y_a, valid_len)

    def scores(self, visual, audio, valid_len):
        """Per-class probabilities for one video, as a plain ndarray."""
        return sigmoid(self.forward(visual, audio, valid_len)).data[0]

    def state(self):
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_state(self, state):
        for name, p in self.parameters():
            if name not in state:
                raise ValueError(f"missing parameter block {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name!r} shape mismatch")
            p.data = arr


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def labels_to_targets(labels, num_classes):
    y = np.zeros((1, num_classes))
    for c in labels:
        y[0, c] = 1.0
    return y


def bce_loss(logits, labels):
    """Mean over classes of binary cross-entropy against a label set."""
    return bce_with_logits(logits, labels_to_targets(labels, logits.shape[-1]))


# ---------------------------------------------------------------------------
# checkpoint format: magic "LATN", version u32, config JSON blob, then named
# float32 parameter blocks; everything little-endian
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg, state):
    blocks = sorted(state.items())
    cfg_blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            nb = name.encode()
            a32 = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a32.ndim))
            f.write(struct.pack(f"<{a32.ndim}I", *a32.shape))
            f.write(a32.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        n, = struct.unpack("<I", f.read(4))
        cfg = EncoderConfig(**json.loads(f.read(n).decode()))
        count, = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(count):
            ln, = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            ndim, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            raw = f.read(4 * int(np.prod(shape)))
            if len(raw) != 4 * int(np.prod(shape)):
                raise ValueError(f"{path}: truncated block {name!r}")
            state[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return cfg, state


def load_model(path):
    cfg, state = load_checkpoint(path)
    model = Model(cfg, seed=0)
    model.load_state(state)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (_, p) in enumerate(self.params):
            g = grads[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def evaluate_scores(model, records):
    """Score a record list; returns [(scores, labels)] in record order."""
    t = model.cfg.max_frames
    out = []
    for item in batch_and_pad(records, t, len(records))[0]:
        out.append((model.scores(item.visual, item.audio, item.valid_len),
                    item.labels))
    return out


def train(model, train_records, val_records, tc: TrainConfig):
    """Adam + plateau scheduler on validation GAP + early stopping.

    Returns (log, best_state); the model is left holding the best state.
    Deterministic given the seed and record order.
    """
    rng = np.random.default_rng(tc.seed)
    params = model.parameters()
    opt = Adam(params, tc.lr)
    t = model.cfg.max_frames

    best_gap = -1.0
    best_state = model.state()
    lr_bad = stop_bad = 0
    log = []
    loss_sum = loss_n = 0.0
    it = 0
    order = []

    while it < tc.max_iters:
        if not order:
            order = list(rng.permutation(len(train_records)))
        take = [train_records[order.pop()] for _ in
                range(min(tc.batch_size, len(order)))]
        batch = batch_and_pad(take, t, len(take))[0]

        for _, p in params:
            p.grad = None
        batch_loss = 0.0
        for item in batch:
            loss = bce_loss(model.forward(item.visual, item.audio, item.valid_len),
                            item.labels)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            loss.backward()
            batch_loss += loss.item()
        grads = [(p.grad if p.grad is not None else np.zeros_like(p.data)) / len(batch)
                 for _, p in params]
        opt.step(grads)

        it += 1
        loss_sum += batch_loss / len(batch)
        loss_n += 1

        if it % tc.eval_every == 0 or it == tc.max_iters:
            preds = evaluate_scores(model, val_records)
            val_gap = metrics.gap(preds)
            log.append({"iter": it, "loss": loss_sum / max(loss_n, 1),
                        "val_gap": val_gap, "lr": opt.lr})
            loss_sum = loss_n = 0.0
            if val_gap > best_gap:
                best_gap = val_gap
                best_state = model.state()
                lr_bad = stop_bad = 0
            else:
                lr_bad += 1
                stop_bad += 1
                if lr_bad >= tc.lr_patience:
                    opt.lr *= tc.lr_factor
                    lr_bad = 0
                if stop_bad >= tc.early_stop_patience:
                    break

    model.load_state(best_state)
    return log, best_state
