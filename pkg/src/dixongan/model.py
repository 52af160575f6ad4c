"""3D U-Net generator, 3D PatchGAN discriminator and the training losses."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .errors import ConfigError, ShapeError

DESK_FILTERS = (16, 32, 64, 64, 64, 64)
PAPER_FILTERS = (64, 128, 256, 512, 512, 512)
DEFAULT_LAMBDA = 100.0
INIT_STD = 0.02
LEAK = 0.2


class InputMode(str, enum.Enum):
    SINGLE_IP = "SINGLE_IP"
    DUAL_IP_OP = "DUAL_IP_OP"

    @property
    def channels(self):
        return 1 if self is InputMode.SINGLE_IP else 2


class LossMode(str, enum.Enum):
    L1 = "L1"
    DIXON = "DIXON"


@dataclass
class GeneratorConfig:
    input_mode: InputMode = InputMode.DUAL_IP_OP
    levels: int = 6
    filter_schedule: tuple = DESK_FILTERS
    output_channels: int = 2
    crop_size: tuple = (128, 128, 128)
    norm: str = "instance"

    def __post_init__(self):
        self.input_mode = InputMode(self.input_mode)
        self.filter_schedule = tuple(int(f) for f in self.filter_schedule)
        if isinstance(self.crop_size, int):
            self.crop_size = (self.crop_size,) * 3
        self.crop_size = tuple(int(c) for c in self.crop_size)

    def validate(self):
        if self.levels < 1:
            raise ConfigError("generator needs at least one level")
        if len(self.filter_schedule) != self.levels:
            raise ConfigError(f"filter schedule has {len(self.filter_schedule)} entries "
                              f"for {self.levels} levels")
        step = 2 ** self.levels
        if any(c % step for c in self.crop_size):
            raise ConfigError(f"crop size {self.crop_size} not divisible by 2^{self.levels}={step}")
        if self.output_channels != 2:
            raise ConfigError("generator predicts exactly two channels (fat, water)")
        _check_norm(self.norm)


@dataclass
class DiscriminatorConfig:
    strides: tuple = (2, 1, 1)
    filter_schedule: tuple = (8, 16)
    receptive_field: tuple = (16, 16, 16)
    conditioned: bool = True
    input_mode: InputMode = InputMode.DUAL_IP_OP
    norm: str = "instance"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.filter_schedule = tuple(int(f) for f in self.filter_schedule)
        self.receptive_field = tuple(int(r) for r in self.receptive_field)
        self.input_mode = InputMode(self.input_mode)

    @property
    def in_channels(self):
        return 2 + (self.input_mode.channels if self.conditioned else 0)

    def validate(self):
        if len(self.filter_schedule) != len(self.strides) - 1:
            raise ConfigError("discriminator needs one filter count per layer except the logit layer")
        _check_norm(self.norm)
        rf = receptive_field(self.strides)
        if (rf,) * 3 != self.receptive_field:
            raise ConfigError(f"strides {list(self.strides)} give receptive field {rf}, "
                              f"expected {self.receptive_field}")


def _check_norm(norm):
    # "none" exists for locality tests; training uses instance or batch
    if norm not in ("instance", "batch", "none"):
        raise ConfigError(f"unknown norm {norm!r}")


def receptive_field(strides, kernel=ad.KERNEL):
    """Input extent seen by one output unit: r += (k-1)*jump; jump *= stride."""
    r, jump = 1, 1
    for s in strides:
        r += (kernel - 1) * jump
        jump *= s
    return r


def receptive_window(index, strides, padding=1, kernel=ad.KERNEL):
    """Half-open input interval (may extend into padding) feeding output ``index``
    along one axis."""
    lo, hi = index, index + 1
    for s in reversed(strides):
        lo, hi = lo * s - padding, (hi - 1) * s - padding + kernel
    return lo, hi


def discriminator_output_dims(spatial, strides, padding=1):
    dims = tuple(spatial)
    for s in strides:
        dims = tuple(ad.conv_output_size(d, s, padding) for d in dims)
    return dims


def _init_conv(rng, shape, nbias, dtype, name, stride=2, transposed=False):
    w = Tensor((rng.normal(0.0, INIT_STD, size=shape)).astype(dtype), requires_grad=True,
               name=f"{name}.w")
    b = Tensor(np.zeros(nbias, dtype=dtype), requires_grad=True, name=f"{name}.b")
    return ConvParams(w, b, stride, 1, transposed)


def _init_norm(c, dtype, name):
    return (Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{name}.beta"))


class _Network:
    def __init__(self):
        self.params = {}

    def _register(self, item):
        if isinstance(item, ConvParams):
            for t in (item.weight, item.bias):
                self.params[t.name] = t
        else:
            for t in item:
                self.params[t.name] = t
        return item

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.values = np.array(arrays[name], dtype=p.dtype)


class Generator(_Network):
    """U-Net: ``levels`` stride-2 convolutions down, mirrored stride-2
    transpose convolutions up, skip connections by concatenation, sigmoid
    output with channels (fat, water)."""

    def __init__(self, cfg: GeneratorConfig, seed=0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng([seed, 0x6E])
        f = cfg.filter_schedule
        cin = cfg.input_mode.channels
        self.down = []
        self.down_norm = []
        for i in range(cfg.levels):
            prev = cin if i == 0 else f[i - 1]
            self.down.append(self._register(
                _init_conv(rng, (f[i], prev, 4, 4, 4), f[i], dtype, f"G.down{i}")))
            inner = 0 < i < cfg.levels - 1 and cfg.norm != "none"
            self.down_norm.append(self._register(_init_norm(f[i], dtype, f"G.down{i}.norm"))
                                  if inner else None)
        self.up = []
        self.up_norm = []
        for i in range(cfg.levels - 1, 0, -1):
            cin_up = f[i] if i == cfg.levels - 1 else 2 * f[i]
            self.up.append(self._register(
                _init_conv(rng, (cin_up, f[i - 1], 4, 4, 4), f[i - 1], dtype, f"G.up{i}",
                           transposed=True)))
            self.up_norm.append(self._register(_init_norm(f[i - 1], dtype, f"G.up{i}.norm"))
                                if cfg.norm != "none" else None)
        last_in = f[0] if cfg.levels == 1 else 2 * f[0]
        self.out = self._register(
            _init_conv(rng, (last_in, cfg.output_channels, 4, 4, 4), cfg.output_channels,
                       dtype, "G.out", transposed=True))

    @property
    def input_mode(self):
        return self.config.input_mode

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[1] != self.config.input_mode.channels:
            raise ShapeError(f"generator expects {self.config.input_mode.channels} input "
                             f"channels, got {x.shape[1]}")
        if any(d % 2 ** self.config.levels for d in x.shape[2:]):
            raise ShapeError(f"spatial dims {x.shape[2:]} not divisible by 2^{self.config.levels}")
        skips = []
        h = x
        for conv, norm in zip(self.down, self.down_norm):
            h = ad.conv3d(h, conv)
            if norm is not None:
                h = ad.norm_layer(h, *norm, mode=self.config.norm)
            h = ad.leaky_relu(h, LEAK)
            skips.append(h)
        skips.pop()
        for conv, norm in zip(self.up, self.up_norm):
            h = ad.tconv3d(h, conv)
            if norm is not None:
                h = ad.norm_layer(h, *norm, mode=self.config.norm)
            h = ad.relu(h)
            h = ad.concat([h, skips.pop()], axis=1)
        return ad.sigmoid(ad.tconv3d(h, self.out))

    def predict(self, x):
        with ad.no_grad():
            return self(np.asarray(x, dtype=self.dtype)).values

    @property
    def dtype(self):
        return self.out.weight.dtype


class Discriminator(_Network):
    """PatchGAN: kernel-4 convolutions with the configured strides ending in a
    one-channel logit map."""

    def __init__(self, cfg: DiscriminatorConfig, seed=0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng([seed, 0x44])
        chans = (cfg.in_channels,) + cfg.filter_schedule + (1,)
        self.layers = []
        self.norms = []
        for i, s in enumerate(cfg.strides):
            self.layers.append(self._register(
                _init_conv(rng, (chans[i + 1], chans[i], 4, 4, 4), chans[i + 1], dtype,
                           f"D.conv{i}", stride=s)))
            inner = 0 < i < len(cfg.strides) - 1 and cfg.norm != "none"
            self.norms.append(self._register(_init_norm(chans[i + 1], dtype, f"D.conv{i}.norm"))
                              if inner else None)

    def __call__(self, x):
        h = ad.as_tensor(x)
        if h.shape[1] != self.config.in_channels:
            raise ShapeError(f"discriminator expects {self.config.in_channels} channels, "
                             f"got {h.shape[1]}")
        last = len(self.layers) - 1
        for i, (conv, norm) in enumerate(zip(self.layers, self.norms)):
            h = ad.conv3d(h, conv)
            if i == last:
                break
            if norm is not None:
                h = ad.norm_layer(h, *norm, mode=self.config.norm)
            h = ad.leaky_relu(h, LEAK)
        return h

    def judge(self, conditioning, fat_water):
        """Logits for a (fat, water) pair, conditioned on the inputs unless
        conditioning is disabled."""
        if self.config.conditioned:
            return self(ad.concat([conditioning, fat_water], axis=1))
        return self(fat_water)


def build_generator(cfg: GeneratorConfig, seed=0, dtype=np.float32) -> Generator:
    return Generator(cfg, seed, dtype)


def build_discriminator(cfg: DiscriminatorConfig, seed=0, dtype=np.float32) -> Discriminator:
    return Discriminator(cfg, seed, dtype)


# -- losses ---------------------------------------------------------------------------------

@dataclass
class LossBundle:
    adv_g: float
    adv_d: float
    recon: float
    total_g: float
    lam: float = DEFAULT_LAMBDA

    def is_finite(self):
        return all(np.isfinite([self.adv_g, self.adv_d, self.recon, self.total_g]))


def adversarial_losses(d_real_logits, d_fake_logits):
    """Returns (adv_d, adv_g) as scalar tensors: discriminator cross-entropy
    real->1 plus fake->0, and generator cross-entropy fake->1."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise ShapeError(f"logit maps differ: {d_real_logits.shape} vs {d_fake_logits.shape}")
    adv_d = ad.bce_with_logits(d_real_logits, 1.0) + ad.bce_with_logits(d_fake_logits, 0.0)
    adv_g = ad.bce_with_logits(d_fake_logits, 1.0)
    return adv_d, adv_g


def l1_loss(pred_f, pred_w, true_f, true_w):
    """Mean absolute error over both channels jointly."""
    for p, t in ((pred_f, true_f), (pred_w, true_w)):
        if p.shape != t.shape:
            raise ShapeError(f"l1_loss: {p.shape} vs {t.shape}")
    true_f = ad.as_tensor(true_f)
    true_w = ad.as_tensor(true_w)
    total = ad.sum(ad.absolute(pred_f - true_f)) + ad.sum(ad.absolute(pred_w - true_w))
    return total * (1.0 / (2 * pred_f.values.size))


def dixon_loss(pred_f, pred_w, ip, op, norm="rms"):
    """Physics residuals of the two-point model, no fat/water labels needed:
    ||IP - (W + F)|| + ||OP - |W - F|||, each term as the root-mean-square
    residual over the crop (``norm="ms"`` drops the root)."""
    for t in (pred_w, ip, op):
        if t.shape != pred_f.shape:
            raise ShapeError(f"dixon_loss: {t.shape} vs {pred_f.shape}")
    ip = ad.as_tensor(ip)
    op = ad.as_tensor(op)
    r_ip = ip - (pred_w + pred_f)
    r_op = op - ad.absolute(pred_w - pred_f)
    ms_ip = ad.mean(ad.square(r_ip))
    ms_op = ad.mean(ad.square(r_op))
    if norm == "rms":
        return ad.sqrt(ms_ip) + ad.sqrt(ms_op)
    if norm == "ms":
        return ms_ip + ms_op
    raise ValueError(f"unknown dixon norm {norm!r}")


def check_modes(input_mode, loss_mode):
    if InputMode(input_mode) is InputMode.SINGLE_IP and LossMode(loss_mode) is LossMode.DIXON:
        raise ConfigError("Dixon loss needs both IP and OP: with IP alone, an empty fat or "
                          "water channel satisfies IP = W + F trivially")


def generator_objective(d_fake_logits, pred, mode=LossMode.L1, lam=DEFAULT_LAMBDA,
                        labels=None, ip=None, op=None, input_mode=InputMode.DUAL_IP_OP,
                        dixon_norm="rms"):
    """Generator loss adv_g + lam * recon.

    ``pred`` is the (N, 2, ...) generator output in (fat, water) order.
    L1 mode needs ``labels`` of the same layout; DIXON mode needs ``ip`` and
    ``op`` (N, 1, ...) and refuses labels. Returns (total tensor, adv_g
    tensor, recon tensor).
    """
    mode = LossMode(mode)
    check_modes(input_mode, mode)
    adv_g = ad.bce_with_logits(d_fake_logits, 1.0)
    pf, pw = ad.channel(pred, 0), ad.channel(pred, 1)
    if mode is LossMode.L1:
        if labels is None:
            raise ConfigError("L1 objective needs fat/water labels")
        labels = ad.as_tensor(labels)
        recon = l1_loss(pf, pw, ad.channel(labels, 0), ad.channel(labels, 1))
    else:
        if labels is not None:
            raise ConfigError("Dixon objective must not see fat/water labels")
        if ip is None or op is None:
            raise ConfigError("Dixon objective needs ip and op")
        recon = dixon_loss(pf, pw, ip, op, dixon_norm)
    total = adv_g + recon * lam
    return total, adv_g, recon


def combine(adv_g, recon, lam=DEFAULT_LAMBDA):
    """Scalar form of the generator objective."""
    return float(adv_g) + lam * float(recon)


def model_config_dict(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, **extra):
    d = {
        "generator": {"input_mode": gcfg.input_mode.value, "levels": gcfg.levels,
                      "filter_schedule": list(gcfg.filter_schedule),
                      "crop_size": list(gcfg.crop_size), "norm": gcfg.norm},
        "discriminator": {"strides": list(dcfg.strides),
                          "filter_schedule": list(dcfg.filter_schedule),
                          "conditioned": dcfg.conditioned, "norm": dcfg.norm},
    }
    d.update(extra)
    return d


def configs_from_dict(d):
    g = d["generator"]
    gcfg = GeneratorConfig(input_mode=g["input_mode"], levels=g["levels"],
                           filter_schedule=tuple(g["filter_schedule"]),
                           crop_size=tuple(g["crop_size"]), norm=g.get("norm", "instance"))
    k = d["discriminator"]
    dcfg = DiscriminatorConfig(strides=tuple(k["strides"]),
                               filter_schedule=tuple(k["filter_schedule"]),
                               conditioned=k.get("conditioned", True),
                               input_mode=gcfg.input_mode, norm=k.get("norm", "instance"))
    return gcfg, dcfg
