"""Toy hazard-tracking vision-language network.

A patch-based vision encoder that exposes its last layer's attention map,
a text encoder, per-modality projectors into a shared latent space, and a
small causal decoder that cross-attends to the fused latent sequence.
Low-rank adapters can be attached to the attention Q/V weights, the final
decoder feed-forward output weight, and the projector weights; with
adapters enabled the base weights stay frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import RESERVED, START, END
from .localization import AttentionMap, aggregate_heads
from .tensor import Tensor

START_ID = RESERVED.index(START)
END_ID = RESERVED.index(END)

INIT_STD = 0.02
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = 32
    latent_dim: int = 16
    lora_rank: int = 4
    max_caption_len: int = 16
    projector: str = "linear"  # "linear" | "mlp"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 1 <= self.lora_rank <= min(self.embed_dim, self.latent_dim):
            raise ValueError("need 1 <= lora_rank <= min(embed_dim, latent_dim)")
        if self.projector not in ("linear", "mlp"):
            raise ValueError(f"unknown projector kind {self.projector!r}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass
class LoRAAdapter:
    """Low-rank factors adapting one frozen base weight: delta = a @ b."""

    a: Tensor  # d_in x r
    b: Tensor  # r x d_out
    target: str

    def delta_params(self) -> int:
        return self.a.size + self.b.size


def effective_weight(w: Tensor, adapter: LoRAAdapter) -> Tensor:
    """w + a @ b, leaving w untouched."""
    d_in, d_out = w.shape
    if adapter.a.shape[0] != d_in or adapter.b.shape[1] != d_out:
        raise tz.ShapeError(
            f"adapter ({adapter.a.shape} x {adapter.b.shape}) does not fit weight {w.shape}"
        )
    if adapter.a.shape[1] != adapter.b.shape[0]:
        raise tz.ShapeError("adapter factors have mismatched rank")
    return tz.add(w, tz.matmul(adapter.a, adapter.b))


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """C x S x S image to (S/p)^2 x (C p^2) patch rows.

    Patches are ordered row-major over the grid (top-left first, rows
    before columns); each output row is one flattened patch.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.ndim != 3:
        raise tz.ShapeError(f"expected C x S x S image, got shape {image.shape}")
    c, s, s2 = image.shape
    if s != s2:
        raise tz.ShapeError(f"image must be square, got {image.shape}")
    if s % patch_size:
        raise tz.ShapeError(f"size {s} not divisible by patch size {patch_size}")
    g = s // patch_size
    x = tz.reshape(image, (c, g, patch_size, g, patch_size))
    x = tz.permute(x, (1, 3, 0, 2, 4))  # gy, gx, c, py, px
    return tz.reshape(x, (g * g, c * patch_size * patch_size))


@dataclass
class ModelParams:
    """Named tensors, adapters keyed by target name, and the trainable set."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    adapters: dict[str, LoRAAdapter] = field(default_factory=dict)
    trainable: set[str] = field(default_factory=set)


def lora_target_names(config: ModelConfig) -> list[str]:
    """Weights that receive adapters: attention Q/V everywhere, the last
    decoder feed-forward output weight, and the projector weight(s)."""
    names = []
    for i in range(config.encoder_layers):
        names += [f"vis.{i}.attn.wq", f"vis.{i}.attn.wv"]
        names += [f"txt.{i}.attn.wq", f"txt.{i}.attn.wv"]
    for i in range(config.decoder_layers):
        names += [f"dec.{i}.self.wq", f"dec.{i}.self.wv"]
        names += [f"dec.{i}.cross.wq", f"dec.{i}.cross.wv"]
    names.append(f"dec.{config.decoder_layers - 1}.ffn.w2")
    if config.projector == "linear":
        names += ["proj.img.w", "proj.txt.w"]
    else:
        names += ["proj.img.w2", "proj.txt.w2"]
    return names


class HazardModel:
    """Parameters plus forward passes; single-threaded with its tape."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = ModelParams()
        self.lora_enabled = False
        self._rng = np.random.default_rng((seed, 0x5EED))
        self._build()
        self.params.trainable = set(self.params.tensors)

    # -- construction ------------------------------------------------------

    def _weight(self, name: str, *shape: int) -> None:
        data = self._rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        self.params.tensors[name] = Tensor(data, requires_grad=True)

    def _zeros(self, name: str, *shape: int) -> None:
        self.params.tensors[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

    def _ones(self, name: str, *shape: int) -> None:
        self.params.tensors[name] = Tensor(np.ones(shape, np.float32), requires_grad=True)

    def _linear(self, name: str, d_in: int, d_out: int) -> None:
        self._weight(f"{name}.w", d_in, d_out)
        self._zeros(f"{name}.b", d_out)

    def _build(self) -> None:
        cfg = self.config
        d, k = cfg.embed_dim, cfg.latent_dim

        self._linear("vis.patch_embed", cfg.patch_dim, d)
        self._weight("vis.pos", cfg.n_patches, d)
        for i in range(cfg.encoder_layers):
            self._encoder_block_params(f"vis.{i}")

        self._weight("txt.embed", cfg.vocab_size, d)
        self._weight("txt.pos", cfg.max_caption_len, d)
        for i in range(cfg.encoder_layers):
            self._encoder_block_params(f"txt.{i}")

        if cfg.projector == "linear":
            self._linear("proj.img", d, k)
            self._linear("proj.txt", d, k)
        else:
            for which in ("img", "txt"):
                self._weight(f"proj.{which}.w1", d, d)
                self._zeros(f"proj.{which}.b1", d)
                self._weight(f"proj.{which}.w2", d, k)
                self._zeros(f"proj.{which}.b2", k)

        self._weight("dec.embed", cfg.vocab_size, d)
        self._weight("dec.pos", cfg.max_caption_len, d)
        for i in range(cfg.decoder_layers):
            self._decoder_block_params(f"dec.{i}")
        self._ones("dec.ln_f.g", d)
        self._zeros("dec.ln_f.b", d)
        self._linear("dec.out", d, cfg.vocab_size)

    def _attn_params(self, prefix: str, kv_dim: int) -> None:
        d = self.config.embed_dim
        self._weight(f"{prefix}.wq", d, d)
        self._zeros(f"{prefix}.bq", d)
        self._weight(f"{prefix}.wk", kv_dim, d)
        self._zeros(f"{prefix}.bk", d)
        self._weight(f"{prefix}.wv", kv_dim, d)
        self._zeros(f"{prefix}.bv", d)
        self._weight(f"{prefix}.wo", d, d)
        self._zeros(f"{prefix}.bo", d)

    def _ffn_params(self, prefix: str) -> None:
        d = self.config.embed_dim
        hidden = d * self.config.ffn_mult
        self._weight(f"{prefix}.w1", d, hidden)
        self._zeros(f"{prefix}.b1", hidden)
        self._weight(f"{prefix}.w2", hidden, d)
        self._zeros(f"{prefix}.b2", d)

    def _ln_params(self, prefix: str) -> None:
        d = self.config.embed_dim
        self._ones(f"{prefix}.g", d)
        self._zeros(f"{prefix}.b", d)

    def _encoder_block_params(self, prefix: str) -> None:
        self._ln_params(f"{prefix}.ln1")
        self._attn_params(f"{prefix}.attn", self.config.embed_dim)
        self._ln_params(f"{prefix}.ln2")
        self._ffn_params(f"{prefix}.ffn")

    def _decoder_block_params(self, prefix: str) -> None:
        cfg = self.config
        self._ln_params(f"{prefix}.ln1")
        self._attn_params(f"{prefix}.self", cfg.embed_dim)
        self._ln_params(f"{prefix}.ln2")
        self._attn_params(f"{prefix}.cross", cfg.latent_dim)
        self._ln_params(f"{prefix}.ln3")
        self._ffn_params(f"{prefix}.ffn")

    # -- LoRA --------------------------------------------------------------

    def enable_lora(self, seed: int = 0) -> None:
        """Attach fresh adapters, freeze the base, and mark the fine-tune
        trainable set (adapter factors plus projector biases)."""
        if self.lora_enabled:
            raise RuntimeError("adapters already enabled")
        cfg = self.config
        rng = np.random.default_rng((seed, 0x10BA))
        r = cfg.lora_rank
        for target in lora_target_names(cfg):
            w = self.params.tensors[target]
            d_in, d_out = w.shape
            a = Tensor(rng.normal(0.0, INIT_STD, size=(d_in, r)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros((r, d_out), np.float32), requires_grad=True)
            self.params.adapters[target] = LoRAAdapter(a=a, b=b, target=target)
            self.params.tensors[f"lora.{target}.a"] = a
            self.params.tensors[f"lora.{target}.b"] = b
        self.lora_enabled = True
        trainable = {f"lora.{t}.a" for t in self.params.adapters}
        trainable |= {f"lora.{t}.b" for t in self.params.adapters}
        trainable |= {
            n
            for n in self.params.tensors
            if n.startswith("proj.") and n.rsplit(".", 1)[-1].startswith("b")
        }
        self.params.trainable = trainable
        for name, t in self.params.tensors.items():
            t.requires_grad = name in trainable

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {n: self.params.tensors[n] for n in sorted(self.params.trainable)}

    def frozen_tensors(self) -> dict[str, Tensor]:
        return {
            n: t for n, t in self.params.tensors.items() if n not in self.params.trainable
        }

    # -- forward pieces ------------------------------------------------------

    def _w(self, name: str) -> Tensor:
        t = self.params.tensors[name]
        if self.lora_enabled and name in self.params.adapters:
            return effective_weight(t, self.params.adapters[name])
        return t

    def _p(self, name: str) -> Tensor:
        return self.params.tensors[name]

    def _attention(self, x: Tensor, kv: Tensor, prefix: str, causal: bool):
        """Multi-head scaled dot-product attention; returns (output,
        per-head maps as an h x n_q x n_kv tensor)."""
        cfg = self.config
        h, d = cfg.heads, cfg.embed_dim
        dh = d // h
        if kv is None:
            kv = x
        q = tz.add(tz.matmul(x, self._w(f"{prefix}.wq")), self._p(f"{prefix}.bq"))
        kmat = tz.add(tz.matmul(kv, self._w(f"{prefix}.wk")), self._p(f"{prefix}.bk"))
        v = tz.add(tz.matmul(kv, self._w(f"{prefix}.wv")), self._p(f"{prefix}.bv"))
        n_q, n_kv = q.shape[0], kmat.shape[0]
        mask = None
        if causal:
            m = np.triu(np.full((n_q, n_kv), MASK_VALUE, np.float32), k=1)
            mask = Tensor(m)
        heads, maps = [], []
        for i in range(h):
            qh = tz.slice_axis(q, 1, i * dh, (i + 1) * dh)
            kh = tz.slice_axis(kmat, 1, i * dh, (i + 1) * dh)
            vh = tz.slice_axis(v, 1, i * dh, (i + 1) * dh)
            scores = tz.scale(tz.matmul(qh, tz.transpose(kh)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = tz.add(scores, mask)
            attn = tz.softmax(scores, axis=1)
            maps.append(tz.reshape(attn, (1, n_q, n_kv)))
            heads.append(tz.matmul(attn, vh))
        out = tz.concat(heads, axis=1)
        out = tz.add(tz.matmul(out, self._w(f"{prefix}.wo")), self._p(f"{prefix}.bo"))
        return out, tz.concat(maps, axis=0)

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        hmid = tz.gelu(tz.add(tz.matmul(x, self._w(f"{prefix}.w1")), self._p(f"{prefix}.b1")))
        return tz.add(tz.matmul(hmid, self._w(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return tz.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _encoder_block(self, x: Tensor, prefix: str):
        attn_out, maps = self._attention(self._ln(x, f"{prefix}.ln1"), kv=None, prefix=f"{prefix}.attn", causal=False)
        x = tz.add(x, attn_out)
        x = tz.add(x, self._ffn(self._ln(x, f"{prefix}.ln2"), f"{prefix}.ffn"))
        return x, maps

    # -- public forward ------------------------------------------------------

    def encode_image(self, image) -> tuple[Tensor, AttentionMap]:
        """Per-patch features and the aggregated last-layer attention map."""
        cfg = self.config
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
            raise tz.ShapeError(
                f"image shape {image.shape} != configured "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
            )
        patches = patchify(image, cfg.patch_size)
        x = tz.add(tz.matmul(patches, self._w("vis.patch_embed.w")), self._p("vis.patch_embed.b"))
        x = tz.add(x, self._p("vis.pos"))
        maps = None
        for i in range(cfg.encoder_layers):
            x, maps = self._encoder_block(x, f"vis.{i}")
        amap = aggregate_heads(maps, grid_shape=(cfg.grid_side, cfg.grid_side))
        return x, amap

    def encode_text(self, tokens) -> Tensor:
        cfg = self.config
        ids = list(tokens)
        if not ids:
            raise tz.ShapeError("encode_text requires at least one token")
        if len(ids) > cfg.max_caption_len:
            raise tz.ShapeError(f"{len(ids)} tokens exceed max length {cfg.max_caption_len}")
        x = tz.take_rows(self._p("txt.embed"), ids)
        x = tz.add(x, tz.slice_axis(self._p("txt.pos"), 0, 0, len(ids)))
        for i in range(cfg.encoder_layers):
            x, _ = self._encoder_block(x, f"txt.{i}")
        return x

    def project(self, features: Tensor, which: str) -> Tensor:
        """Map encoder features (n x d) into the shared latent space (n x k)."""
        if which not in ("image", "text"):
            raise ValueError(f"unknown projector {which!r}")
        name = "proj.img" if which == "image" else "proj.txt"
        if features.shape[1] != self.config.embed_dim:
            raise tz.ShapeError(f"expected width {self.config.embed_dim}, got {features.shape}")
        if self.config.projector == "linear":
            return tz.add(tz.matmul(features, self._w(f"{name}.w")), self._p(f"{name}.b"))
        mid = tz.gelu(tz.add(tz.matmul(features, self._w(f"{name}.w1")), self._p(f"{name}.b1")))
        return tz.add(tz.matmul(mid, self._w(f"{name}.w2")), self._p(f"{name}.b2"))

    def fuse(self, e_img: Tensor, e_text: Tensor) -> Tensor:
        """Sequence concatenation in latent space: image rows then text rows."""
        k = self.config.latent_dim
        if e_img.shape[1] != k or e_text.shape[1] != k:
            raise tz.ShapeError(
                f"latent widths {e_img.shape[1]}/{e_text.shape[1]} != {k}"
            )
        return tz.concat([e_img, e_text], axis=0)

    def _decoder_states(self, fused: Tensor, input_ids: list[int]) -> Tensor:
        cfg = self.config
        x = tz.take_rows(self._p("dec.embed"), input_ids)
        x = tz.add(x, tz.slice_axis(self._p("dec.pos"), 0, 0, len(input_ids)))
        for i in range(cfg.decoder_layers):
            prefix = f"dec.{i}"
            sa, _ = self._attention(self._ln(x, f"{prefix}.ln1"), kv=None, prefix=f"{prefix}.self", causal=True)
            x = tz.add(x, sa)
            ca, _ = self._attention(self._ln(x, f"{prefix}.ln2"), kv=fused, prefix=f"{prefix}.cross", causal=False)
            x = tz.add(x, ca)
            x = tz.add(x, self._ffn(self._ln(x, f"{prefix}.ln3"), f"{prefix}.ffn"))
        x = self._ln(x, "dec.ln_f")
        return tz.add(tz.matmul(x, self._w("dec.out.w")), self._p("dec.out.b"))

    def decode_caption_teacher_forced(self, fused: Tensor, targets) -> Tensor:
        """Logits (T x V) for predicting `targets`; position t conditions on
        the start token and targets before t only."""
        targets = list(targets)
        if not targets:
            raise tz.ShapeError("empty target sequence")
        if len(targets) > self.config.max_caption_len:
            raise tz.ShapeError(
                f"target length {len(targets)} exceeds max {self.config.max_caption_len}"
            )
        input_ids = [START_ID] + targets[:-1]
        return self._decoder_states(fused, input_ids)

    def generate(
        self,
        fused: Tensor,
        max_len: int,
        top_p: float = 0.9,
        temperature: float = 0.95,
        seed: int = 0,
    ) -> list[int]:
        """Nucleus sampling; stops at the end token or max_len tokens."""
        if not 0.0 <= top_p <= 1.0:
            raise ValueError(f"top_p must be in [0, 1], got {top_p}")
        if temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if max_len > self.config.max_caption_len:
            raise ValueError(f"max_len {max_len} exceeds max caption length")
        rng = np.random.default_rng(seed)
        ids = [START_ID]
        out: list[int] = []
        for _ in range(max_len):
            logits = self._decoder_states(fused, ids).data[-1].astype(np.float64)
            keep, probs = nucleus(logits, top_p, temperature)
            token = int(rng.choice(keep, p=probs))
            if token == END_ID:
                break
            out.append(token)
            ids.append(token)
        return out


def nucleus(logits: np.ndarray, top_p: float, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted prefix with mass >= top_p, renormalized.

    Returns (kept token indices, their probabilities). At least one token
    is always kept, so top_p -> 0 degenerates to greedy argmax.
    """
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    cut = int(np.searchsorted(csum, top_p, side="left")) + 1
    cut = min(max(cut, 1), len(order))
    keep = order[:cut]
    kept = p[keep]
    return keep, kept / kept.sum()
