"""Two-stream RGB-D saliency network.

Structure: a toy convolutional encoder per modality produces five feature
levels; a cross-enhancement fusion block merges the two streams level by
level (propagating fused output upward through the pyramid); three U-Net
style decoders (RGB-only, depth-only, shared) read the pyramids back out to
full-resolution saliency logits, with a per-level aggregation block feeding
modality decoder features into the shared decoder.

Every fusion and aggregation block has switchable variants so single-toggle
comparisons can be run: the fusion block can be reduced to plain
concatenation, enhancement-only, fusion-only, or propagation-free wiring,
the aggregation block to attention-gating or concatenation, and the
modality-specific decoders can be dropped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from . import nn
from .config import ModelConfig, NUM_LEVELS
from .errors import ValidationError

# Feature pyramids are keyed by 1-based level index (1 = finest).
Pyramid = dict[int, ad.Tensor]


@dataclass
class ForwardOutput:
    """Full-resolution saliency logits; modality maps are None when the
    specific decoders are disabled."""
    s_shared: ad.Tensor
    s_rgb: ad.Tensor | None
    s_depth: ad.Tensor | None


def cim_start_level(cim_levels: int) -> int:
    """First (coarsest-counted) level covered by cross-modal fusion.

    Coverage counts down from the top of the pyramid: 5 covers every level,
    3 covers levels 3..5, 1 covers level 5 only.
    """
    return NUM_LEVELS - cim_levels + 1


class EncoderLevel(nn.Module):
    """Stack of stride-2 blocks realising one level's stride ratio.

    A ratio of 1 still spends one stride-1 block to move to the level's
    channel count.
    """

    def __init__(self, in_c: int, out_c: int, ratio: int):
        super().__init__()
        blocks = []
        if ratio == 1:
            blocks.append(nn.BConv(in_c, out_c, 3, stride=1))
        else:
            c = in_c
            while ratio > 1:
                blocks.append(nn.BConv(c, out_c, 3, stride=2))
                c = out_c
                ratio //= 2
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        for b in self.blocks:
            x = b(x)
        return x

    __call__ = forward


class Encoder(nn.Module):
    def __init__(self, in_c: int, channels: list[int], strides: list[int]):
        super().__init__()
        levels = []
        prev_c, prev_s = in_c, 1
        for c, s in zip(channels, strides):
            levels.append(EncoderLevel(prev_c, c, s // prev_s))
            prev_c, prev_s = c, s
        self.levels = nn.ModuleList(levels)

    def forward(self, x: ad.Tensor) -> Pyramid:
        feats: Pyramid = {}
        for i, level in enumerate(self.levels):
            x = level(x)
            feats[i + 1] = x
        return feats

    __call__ = forward


class ConcatFuse(nn.Module):
    """Baseline fusion: channel-concatenate both streams, one 3x3 conv."""

    takes_prev = False
    propagates = False

    def __init__(self, c: int):
        super().__init__()
        self.fuse = nn.Conv2d(2 * c, c, 3, padding=1)

    def forward(self, f_rgb: ad.Tensor, f_depth: ad.Tensor, prev_s: ad.Tensor | None = None) -> ad.Tensor:
        return self.fuse(ad.concat_channels([f_rgb, f_depth]))

    __call__ = forward


class CimBlock(nn.Module):
    """Cross-enhanced fusion of one pyramid level.

    Full wiring, in order:
      1. 1x1 reduction of both streams to half the level's channels
         (skipped at level 1, which works at full width);
      2. per-stream attention maps w = sigmoid(3x3 conv);
      3. cross enhancement: each stream is amplified where the *other*
         stream's attention is high, f' = f + f * w_other;
      4. per-stream 3x3 conv-bn-relu smoothing, then elementwise product and
         elementwise maximum of the two smoothed streams;
      5. concatenate product and maximum, fuse with conv-bn-relu;
      6. when a previous level's fused output is given, pool it down to this
         level's resolution, concatenate, and fuse once more.

    Variants: "enhance_only" keeps 1-3 (then concatenates the enhanced
    streams and fuses), "fuse_only" keeps 1 and 4-6, "no_propagation" keeps
    1-5.  Plain concatenation lives in ConcatFuse, not here.
    """

    def __init__(self, level: int, c: int, prev_c: int | None, mode: str):
        super().__init__()
        if mode not in ("full", "enhance_only", "fuse_only", "no_propagation"):
            raise ValidationError(f"CimBlock does not implement mode {mode!r}")
        self.level = level
        self.mode = mode
        self.takes_prev = mode in ("full", "fuse_only") and prev_c is not None
        self.propagates = mode in ("full", "fuse_only")
        if level > 1:
            if c < 2:
                raise ValidationError(f"level {level} needs at least 2 channels for reduction, got {c}")
            work = c // 2
            self.reduce_r = nn.Conv2d(c, work, 1)
            self.reduce_d = nn.Conv2d(c, work, 1)
        else:
            work = c
            self.reduce_r = None
            self.reduce_d = None
        self.work = work
        if mode in ("full", "enhance_only", "no_propagation"):
            self.attn_r = nn.Conv2d(work, work, 3, padding=1)
            self.attn_d = nn.Conv2d(work, work, 3, padding=1)
        if mode in ("full", "fuse_only", "no_propagation"):
            self.smooth_r = nn.BConv(work, work, 3)
            self.smooth_d = nn.BConv(work, work, 3)
        self.fuse_cat = nn.BConv(2 * work, c, 3)
        if self.takes_prev:
            self.fuse_prev = nn.BConv(c + prev_c, c, 3)

    def enhance(self, f_rgb: ad.Tensor, f_depth: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Cross enhancement: each stream gated by the other's attention map."""
        w_r = ad.sigmoid(self.attn_r(f_rgb))
        w_d = ad.sigmoid(self.attn_d(f_depth))
        f_rgb2 = ad.add(f_rgb, ad.mul(f_rgb, w_d))
        f_depth2 = ad.add(f_depth, ad.mul(f_depth, w_r))
        return f_rgb2, f_depth2

    def forward(self, f_rgb: ad.Tensor, f_depth: ad.Tensor, prev_s: ad.Tensor | None = None) -> ad.Tensor:
        if self.reduce_r is not None:
            f_rgb = self.reduce_r(f_rgb)
            f_depth = self.reduce_d(f_depth)
        if self.mode in ("full", "enhance_only", "no_propagation"):
            f_rgb, f_depth = self.enhance(f_rgb, f_depth)
        if self.mode == "enhance_only":
            return self.fuse_cat(ad.concat_channels([f_rgb, f_depth]))
        s_r = self.smooth_r(f_rgb)
        s_d = self.smooth_d(f_depth)
        p_mul = ad.mul(s_r, s_d)
        p_max = ad.maximum(s_r, s_d)
        fused = self.fuse_cat(ad.concat_channels([p_mul, p_max]))
        if self.takes_prev and prev_s is not None:
            prev_aligned = ad.align_down_avg(prev_s, fused.data.shape[2:])
            fused = self.fuse_prev(ad.concat_channels([fused, prev_aligned]))
        return fused

    __call__ = forward


class Rfb(nn.Module):
    """Multi-branch context block: a 1x1 branch plus three 1x1 -> dilated-3x3
    branches (dilation 1, 3, 5), concatenated, fused by 1x1 conv, added to a
    1x1-projected residual of the input, then ReLU."""

    def __init__(self, in_c: int, out_c: int):
        super().__init__()
        self.branch0 = nn.Conv2d(in_c, out_c, 1)
        self.branch1_reduce = nn.Conv2d(in_c, out_c, 1)
        self.branch1_conv = nn.Conv2d(out_c, out_c, 3, padding=1, dilation=1)
        self.branch2_reduce = nn.Conv2d(in_c, out_c, 1)
        self.branch2_conv = nn.Conv2d(out_c, out_c, 3, padding=3, dilation=3)
        self.branch3_reduce = nn.Conv2d(in_c, out_c, 1)
        self.branch3_conv = nn.Conv2d(out_c, out_c, 3, padding=5, dilation=5)
        self.fuse = nn.Conv2d(4 * out_c, out_c, 1)
        self.residual = nn.Conv2d(in_c, out_c, 1)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        b0 = self.branch0(x)
        b1 = self.branch1_conv(self.branch1_reduce(x))
        b2 = self.branch2_conv(self.branch2_reduce(x))
        b3 = self.branch3_conv(self.branch3_reduce(x))
        fused = self.fuse(ad.concat_channels([b0, b1, b2, b3]))
        return ad.relu(ad.add(fused, self.residual(x)))

    __call__ = forward


class Mfa(nn.Module):
    """Per-level aggregation of modality decoder features into the shared
    decoder stream.

    Full wiring: project each modality feature to the shared width with a
    1x1 conv, gate the shared feature by each (elementwise product),
    concatenate the two gated maps, fuse with conv-bn-relu, and add the
    shared feature back as a residual.

    "enhance_fusion" swaps the products for sigmoid attention gates with
    residuals, summed; "concat" fuses all three streams by concatenation.
    """

    def __init__(self, c: int, mode: str):
        super().__init__()
        if mode not in ("full", "enhance_fusion", "concat"):
            raise ValidationError(f"Mfa does not implement mode {mode!r}")
        self.mode = mode
        self.proj_r = nn.Conv2d(c, c, 1)
        self.proj_d = nn.Conv2d(c, c, 1)
        if mode == "full":
            self.fuse = nn.BConv(2 * c, c, 3)
        elif mode == "concat":
            self.fuse = nn.BConv(3 * c, c, 3)
        else:
            self.attn_r = nn.Conv2d(c, c, 3, padding=1)
            self.attn_d = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, g_s: ad.Tensor, g_r: ad.Tensor, g_d: ad.Tensor) -> ad.Tensor:
        g_r = self.proj_r(g_r)
        g_d = self.proj_d(g_d)
        if self.mode == "full":
            g_rs = ad.mul(g_s, g_r)
            g_ds = ad.mul(g_s, g_d)
            g_sc = self.fuse(ad.concat_channels([g_rs, g_ds]))
            return ad.add(g_sc, g_s)
        if self.mode == "concat":
            return self.fuse(ad.concat_channels([g_s, g_r, g_d]))
        a_r = ad.sigmoid(self.attn_r(g_r))
        a_d = ad.sigmoid(self.attn_d(g_d))
        return ad.add(g_s, ad.add(ad.mul(g_s, a_r), ad.mul(g_s, a_d)))

    __call__ = forward


class Decoder(nn.Module):
    """Top-down U-Net pass over a five-level pyramid.

    The coarsest level passes through a context block; each finer level
    bilinearly upsamples the running feature to its resolution, concatenates
    the skip, and applies the next context block.  When aggregation modules
    are present (shared decoder only) each stage's output additionally folds
    in the two modality decoders' features at that level.  The head is a 1x1
    conv on the finest stage, upsampled to the network input size.
    """

    def __init__(self, channels: list[int], out_size: int, mfa_mode: str | None):
        super().__init__()
        rfbs = [Rfb(channels[NUM_LEVELS - 1], channels[NUM_LEVELS - 1])]
        for m in range(NUM_LEVELS - 1, 0, -1):
            rfbs.append(Rfb(channels[m] + channels[m - 1], channels[m - 1]))
        self.rfbs = nn.ModuleList(rfbs)  # index 0 -> level 5, index 4 -> level 1
        self.mfa = nn.ModuleList([Mfa(channels[m], mfa_mode) for m in range(NUM_LEVELS)]) if mfa_mode else None
        self.head = nn.Conv2d(channels[0], 1, 1)
        self.out_size = out_size

    def forward(self, skips: Pyramid, mfa_inputs: tuple[Pyramid, Pyramid] | None = None) -> tuple[ad.Tensor, Pyramid]:
        if (mfa_inputs is not None) != (self.mfa is not None):
            raise ValidationError("decoder: aggregation inputs do not match decoder wiring")

        def stage(level: int, feature: ad.Tensor) -> ad.Tensor:
            g = self.rfbs[NUM_LEVELS - level](feature)
            if self.mfa is not None:
                g = self.mfa[level - 1](g, mfa_inputs[0][level], mfa_inputs[1][level])
            return g

        feats: Pyramid = {}
        g = stage(NUM_LEVELS, skips[NUM_LEVELS])
        feats[NUM_LEVELS] = g
        for level in range(NUM_LEVELS - 1, 0, -1):
            th, tw = skips[level].data.shape[2:]
            up = g if g.data.shape[2:] == (th, tw) else ad.upsample_bilinear(g, th, tw)
            g = stage(level, ad.concat_channels([skips[level], up]))
            feats[level] = g
        logits = self.head(feats[1])
        if logits.data.shape[2:] != (self.out_size, self.out_size):
            logits = ad.upsample_bilinear(logits, self.out_size, self.out_size)
        return logits, feats

    __call__ = forward


class FusionModel(nn.Module):
    """The full two-stream network; build with ``build_model``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch, st = cfg.channels, cfg.level_strides
        self.enc_rgb = Encoder(3, ch, st)
        self.enc_depth = Encoder(1, ch, st)
        start = cim_start_level(cfg.cim_levels)
        blocks = []
        for m in range(1, NUM_LEVELS + 1):
            covered = m >= start and cfg.cim_mode != "concat_only"
            if not covered:
                blocks.append(ConcatFuse(ch[m - 1]))
                continue
            # the previous level feeds in only when it is itself covered
            prev_c = ch[m - 2] if m > start else None
            blocks.append(CimBlock(m, ch[m - 1], prev_c, cfg.cim_mode))
        self.cim = nn.ModuleList(blocks)
        mfa_mode = cfg.mfa_mode if (cfg.mfa_mode != "off" and cfg.specific_decoders) else None
        self.dec_shared = Decoder(ch, cfg.input_size, mfa_mode)
        if cfg.specific_decoders:
            self.dec_rgb = Decoder(ch, cfg.input_size, None)
            self.dec_depth = Decoder(ch, cfg.input_size, None)
        else:
            self.dec_rgb = None
            self.dec_depth = None

    def fuse_pyramids(self, f_rgb: Pyramid, f_depth: Pyramid) -> Pyramid:
        fused: Pyramid = {}
        prev: ad.Tensor | None = None
        for m in range(1, NUM_LEVELS + 1):
            block = self.cim[m - 1]
            s = block(f_rgb[m], f_depth[m], prev if block.takes_prev else None)
            fused[m] = s
            prev = s if block.propagates else None
        return fused

    def forward(self, rgb: ad.Tensor, depth: ad.Tensor) -> ForwardOutput:
        size = self.cfg.input_size
        if rgb.data.ndim != 4 or rgb.data.shape[1] != 3 or rgb.data.shape[2:] != (size, size):
            raise ValidationError(f"rgb input must be (N, 3, {size}, {size}), got {rgb.data.shape}")
        if depth.data.ndim != 4 or depth.data.shape[1] != 1 or depth.data.shape[2:] != (size, size):
            raise ValidationError(f"depth input must be (N, 1, {size}, {size}), got {depth.data.shape}")
        if rgb.data.shape[0] != depth.data.shape[0]:
            raise ValidationError("rgb and depth batch sizes differ")
        f_rgb = self.enc_rgb(rgb)
        f_depth = self.enc_depth(depth)
        f_fused = self.fuse_pyramids(f_rgb, f_depth)
        if self.dec_rgb is not None:
            s_rgb, feats_r = self.dec_rgb(f_rgb)
            s_depth, feats_d = self.dec_depth(f_depth)
            mfa_inputs = (feats_r, feats_d) if self.dec_shared.mfa is not None else None
            s_shared, _ = self.dec_shared(f_fused, mfa_inputs)
            return ForwardOutput(s_shared=s_shared, s_rgb=s_rgb, s_depth=s_depth)
        s_shared, _ = self.dec_shared(f_fused)
        return ForwardOutput(s_shared=s_shared, s_rgb=None, s_depth=None)

    __call__ = forward


def build_model(cfg: ModelConfig) -> FusionModel:
    """Construct and seed-initialise the network described by cfg."""
    model = FusionModel(cfg)
    model.initialize(cfg.seed)
    return model


def combine_specific_outputs(out: ForwardOutput) -> ad.Tensor:
    """Probability map averaging the two modality decoders' sigmoids."""
    if out.s_rgb is None or out.s_depth is None:
        raise ValidationError("combine_specific_outputs needs both modality decoder outputs")
    return ad.mul_scalar(ad.add(ad.sigmoid(out.s_rgb), ad.sigmoid(out.s_depth)), 0.5)
