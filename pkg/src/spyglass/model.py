"""The dual-pathway detector: two small CNN encoders, fusion, sigmoid head.

Each pathway is a stack of conv/relu/maxpool stages followed by global
average pooling and a linear projection to the embedding dimension. The
image pathway sees the RGB raster, the spectral pathway sees the normalized
magnitude-spectrum map of the same (possibly augmented) image. Embeddings
are fused by element-wise addition (default) or concatenation, and a single
linear unit with a sigmoid produces P(real).

Label convention project-wide: 1 = real, 0 = fake.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import resize_bilinear
from .errors import DataFormatError
from .spectral import spectral_input_batch

FUSION_MODES = ("add", "concat")
PATHWAY_MASKS = ("joint", "image_only", "spectral_only")


@dataclass
class EncoderConfig:
    input_channels: int = 3
    stage_widths: tuple = (16, 32, 64)
    kernel_size: int = 3
    residual_skips: bool = False
    embed_dim: int = 64

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if not self.stage_widths:
            raise ValueError("stage_widths must be non-empty")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_encoder(params, prefix, cfg, rng):
    k = cfg.kernel_size
    in_ch = cfg.input_channels
    for si, width in enumerate(cfg.stage_widths):
        stage = f"{prefix}.stage{si}"
        params[f"{stage}.conv.kernel"] = Tensor(
            _kaiming_uniform(rng, (width, in_ch, k, k), in_ch * k * k),
            requires_grad=True,
        )
        params[f"{stage}.conv.bias"] = Tensor(
            np.zeros(width, dtype=np.float32), requires_grad=True
        )
        if cfg.residual_skips:
            params[f"{stage}.conv2.kernel"] = Tensor(
                _kaiming_uniform(rng, (width, width, k, k), width * k * k),
                requires_grad=True,
            )
            params[f"{stage}.conv2.bias"] = Tensor(
                np.zeros(width, dtype=np.float32), requires_grad=True
            )
            params[f"{stage}.skip.kernel"] = Tensor(
                _kaiming_uniform(rng, (width, in_ch, 1, 1), in_ch),
                requires_grad=True,
            )
            params[f"{stage}.skip.bias"] = Tensor(
                np.zeros(width, dtype=np.float32), requires_grad=True
            )
        in_ch = width
    params[f"{prefix}.fc.weight"] = Tensor(
        _kaiming_uniform(rng, (in_ch, cfg.embed_dim), in_ch), requires_grad=True
    )
    params[f"{prefix}.fc.bias"] = Tensor(
        np.zeros(cfg.embed_dim, dtype=np.float32), requires_grad=True
    )


class DetectorModel:
    """Holds every learnable tensor by name plus the wiring configuration."""

    def __init__(self, image_config=None, spectral_config=None,
                 fusion_mode="add", pathway_mask="joint", input_side=64,
                 seed=0):
        image_config = image_config or EncoderConfig(input_channels=3)
        spectral_config = spectral_config or EncoderConfig(input_channels=1)
        if image_config.input_channels != 3:
            raise ValueError("image encoder must take 3 input channels")
        if spectral_config.input_channels != 1:
            raise ValueError("spectral encoder must take 1 input channel")
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if pathway_mask not in PATHWAY_MASKS:
            raise ValueError(f"pathway_mask must be one of {PATHWAY_MASKS}")
        if pathway_mask == "joint" and fusion_mode == "add" \
                and image_config.embed_dim != spectral_config.embed_dim:
            raise ValueError(
                "fusion_mode 'add' needs equal embed_dims, got "
                f"{image_config.embed_dim} and {spectral_config.embed_dim}"
            )
        stages = max(len(image_config.stage_widths), len(spectral_config.stage_widths))
        if input_side % (2 ** stages):
            raise ValueError(
                f"input_side {input_side} not divisible by 2^{stages} "
                "(one maxpool halving per stage)"
            )
        self.image_config = image_config
        self.spectral_config = spectral_config
        self.fusion_mode = fusion_mode
        self.pathway_mask = pathway_mask
        self.input_side = int(input_side)
        self.seed = int(seed)

        if pathway_mask == "image_only":
            self.joint_dim = image_config.embed_dim
        elif pathway_mask == "spectral_only":
            self.joint_dim = spectral_config.embed_dim
        elif fusion_mode == "add":
            self.joint_dim = image_config.embed_dim
        else:
            self.joint_dim = image_config.embed_dim + spectral_config.embed_dim

        rng = np.random.default_rng(seed)
        params = {}
        _init_encoder(params, "image_enc", image_config, rng)
        _init_encoder(params, "spectral_enc", spectral_config, rng)
        params["head.weight"] = Tensor(
            _kaiming_uniform(rng, (self.joint_dim, 1), self.joint_dim),
            requires_grad=True,
        )
        params["head.bias"] = Tensor(
            np.zeros(1, dtype=np.float32), requires_grad=True
        )
        self.params = params

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        return self.params

    def parameter_arrays(self):
        """Snapshot of raw parameter values, keyed by name."""
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_parameters(self, named_arrays):
        """Overwrite parameters from name -> array; strict names and shapes."""
        for name in named_arrays:
            if name not in self.params:
                raise DataFormatError(f"unknown tensor name {name!r}")
        missing = set(self.params) - set(named_arrays)
        if missing:
            raise DataFormatError(f"missing tensor(s) {sorted(missing)}")
        for name, arr in named_arrays.items():
            target = self.params[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise DataFormatError(
                    f"dimension mismatch for {name}: checkpoint "
                    f"{tuple(arr.shape)} vs model {tuple(target.shape)}"
                )
            target.data = np.asarray(arr, dtype=np.float32).copy()
            target.grad = None

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    # -- configuration <-> named tensors (for self-describing checkpoints) --

    def config_arrays(self):
        def vec(values):
            return np.asarray(values, dtype=np.float32)

        return {
            "config.fusion_mode": vec(FUSION_MODES.index(self.fusion_mode)),
            "config.pathway_mask": vec(PATHWAY_MASKS.index(self.pathway_mask)),
            "config.input_side": vec(self.input_side),
            "config.image.stage_widths": vec(self.image_config.stage_widths),
            "config.image.kernel_size": vec(self.image_config.kernel_size),
            "config.image.residual_skips": vec(int(self.image_config.residual_skips)),
            "config.image.embed_dim": vec(self.image_config.embed_dim),
            "config.spectral.stage_widths": vec(self.spectral_config.stage_widths),
            "config.spectral.kernel_size": vec(self.spectral_config.kernel_size),
            "config.spectral.residual_skips": vec(
                int(self.spectral_config.residual_skips)
            ),
            "config.spectral.embed_dim": vec(self.spectral_config.embed_dim),
        }

    @classmethod
    def from_config_arrays(cls, arrays, seed=0):
        try:
            def scalar(name):
                return int(round(float(np.asarray(arrays[name]).reshape(-1)[0])))

            def widths(name):
                return tuple(int(round(v)) for v in np.asarray(arrays[name]).reshape(-1))

            image_cfg = EncoderConfig(
                input_channels=3,
                stage_widths=widths("config.image.stage_widths"),
                kernel_size=scalar("config.image.kernel_size"),
                residual_skips=bool(scalar("config.image.residual_skips")),
                embed_dim=scalar("config.image.embed_dim"),
            )
            spectral_cfg = EncoderConfig(
                input_channels=1,
                stage_widths=widths("config.spectral.stage_widths"),
                kernel_size=scalar("config.spectral.kernel_size"),
                residual_skips=bool(scalar("config.spectral.residual_skips")),
                embed_dim=scalar("config.spectral.embed_dim"),
            )
            return cls(
                image_config=image_cfg,
                spectral_config=spectral_cfg,
                fusion_mode=FUSION_MODES[scalar("config.fusion_mode")],
                pathway_mask=PATHWAY_MASKS[scalar("config.pathway_mask")],
                input_side=scalar("config.input_side"),
                seed=seed,
            )
        except KeyError as exc:
            raise DataFormatError(f"checkpoint missing config entry {exc}") from exc


# ---------------------------------------------------------------------------
# forward pieces


def _encode(model, prefix, cfg, batch):
    pad = (cfg.kernel_size - 1) // 2
    p = model.params
    h = batch
    for si in range(len(cfg.stage_widths)):
        stage = f"{prefix}.stage{si}"
        if cfg.residual_skips:
            y = ad.activation(
                ad.conv2d(h, p[f"{stage}.conv.kernel"], p[f"{stage}.conv.bias"],
                          padding=pad),
                "relu",
            )
            y = ad.conv2d(y, p[f"{stage}.conv2.kernel"], p[f"{stage}.conv2.bias"],
                          padding=pad)
            shortcut = ad.conv2d(h, p[f"{stage}.skip.kernel"], p[f"{stage}.skip.bias"])
            h = ad.activation(ad.add(y, shortcut), "relu")
        else:
            h = ad.activation(
                ad.conv2d(h, p[f"{stage}.conv.kernel"], p[f"{stage}.conv.bias"],
                          padding=pad),
                "relu",
            )
        h = ad.pool(h, "max", window=2)
    h = ad.pool(h, "global_avg")
    return ad.dense(h, p[f"{prefix}.fc.weight"], p[f"{prefix}.fc.bias"])


def encode_image(model, batch):
    """Image-pathway embedding for a Tensor[N,3,S,S] batch."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected [N,3,S,S] image batch, got {tuple(batch.shape)}")
    return _encode(model, "image_enc", model.image_config, batch)


def encode_spectral(model, batch):
    """Spectral-pathway embedding for a Tensor[N,1,S,S] batch."""
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected [N,1,S,S] spectrum batch, got {tuple(batch.shape)}")
    return _encode(model, "spectral_enc", model.spectral_config, batch)


def fuse(f_image, f_spectral, mode):
    """Combine pathway embeddings: element-wise sum or [image || spectral]."""
    if mode == "add":
        if f_image.shape != f_spectral.shape:
            raise ValueError(
                f"fuse(add): embedding shapes {tuple(f_image.shape)} and "
                f"{tuple(f_spectral.shape)} differ"
            )
        return ad.add(f_image, f_spectral)
    if mode == "concat":
        return ad.concat(f_image, f_spectral, axis=1)
    raise ValueError(f"unknown fusion mode {mode!r}")


def predict(model, f_joint):
    """P(real) per sample from a joint embedding Tensor[N,D_joint]."""
    if f_joint.ndim != 2 or f_joint.shape[1] != model.joint_dim:
        raise ValueError(
            f"joint embedding dim {tuple(f_joint.shape)} does not match head "
            f"input dim {model.joint_dim}"
        )
    logits = ad.dense(f_joint, model.params["head.weight"], model.params["head.bias"])
    probs = ad.activation(logits, "sigmoid")
    return ad.reshape(probs, (f_joint.shape[0],))


def _normalize(batch):
    return (batch - np.float32(0.5)) / np.float32(0.5)


def prepare_batches(images, side, pathway_mask):
    """Decoded RGB rasters -> normalized pathway input arrays.

    Returns (image_batch or None, spectral_batch or None) as float32 arrays;
    a pathway masked off is not computed at all.
    """
    image_batch = None
    spectral_batch = None
    if pathway_mask in ("joint", "image_only"):
        resized = []
        for img in images:
            img = np.asarray(img)
            if img.shape[:2] != (side, side):
                img = resize_bilinear(img, side, side)
            resized.append(np.transpose(img, (2, 0, 1)))
        image_batch = _normalize(np.stack(resized).astype(np.float32))
    if pathway_mask in ("joint", "spectral_only"):
        spectral_batch = _normalize(spectral_input_batch(images, side))
    return image_batch, spectral_batch


def forward(model, images):
    """Run the configured pathway(s) over decoded RGB rasters.

    Returns (probabilities Tensor[N], joint embeddings Tensor[N,D_joint]).
    """
    image_batch, spectral_batch = prepare_batches(
        images, model.input_side, model.pathway_mask
    )
    if model.pathway_mask == "image_only":
        emb = encode_image(model, Tensor(image_batch))
    elif model.pathway_mask == "spectral_only":
        emb = encode_spectral(model, Tensor(spectral_batch))
    else:
        f_img = encode_image(model, Tensor(image_batch))
        f_spec = encode_spectral(model, Tensor(spectral_batch))
        emb = fuse(f_img, f_spec, model.fusion_mode)
    return predict(model, emb), emb
