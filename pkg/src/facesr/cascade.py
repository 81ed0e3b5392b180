"""Alternating cascade: correspondence refinement and gated hallucination.

Each stage first refines the deformation coefficients from the current
low-res estimate, then upscales 2x (bicubic), warps the detail prior through
the refined dense field, applies the gated two-branch network to predict the
residual, and optionally enforces downsampling consistency with the previous
stage via back-projection. Coefficients are scale-free: the same p drives
every stage's template because the templates are exact rescalings of one
another.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import degrade
from .errors import DataError, DegenerateInputError
from .gatednet import (GatedSRNet, NetConfig, TrainSchedule, forward,
                       train_three_step)
from .geometry import (MeanTemplate, ShapeModel, SimilarityTransform,
                       build_shape_model, eval_warp, eye_centers, fit_coeffs,
                       interocular_distance, landmarks_from_coeffs,
                       make_template, scale_template, similarity_init,
                       warp_template_to_image)
from .prior import PriorConfig, build_prior, rescale_channels
from .regressor import RegressorConfig, predict_update, train_stage
from .resample import bicubic_sample, resize_bicubic, scale_coords


@dataclass
class CascadeConfig:
    n_stages: int = 4
    stage_upscale: int = 2
    input_px_iod: float = 5.0
    n_bases: int = 20
    template_margin: float = 0.35
    branch_depth_first: int = 24
    branch_depth_later: int = 12
    branch_width: int = 64
    gate_depth: int = 6
    gate_width: int = 64
    prior: PriorConfig = field(default_factory=PriorConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    back_projection: bool = True
    bp_iters: int = 3
    bp_step: float = 1.0
    # learning-rate multiplier applied to every layer of cascades after the
    # first; the first cascade always trains at the canonical rates
    later_rate_scale: float = 0.1
    seed: int = 0
    # ablation switches
    common_only: bool = False
    hf_only: bool = False
    freeze_correspondence: bool = False

    def __post_init__(self):
        if self.n_stages < 1:
            raise DataError("cascade needs at least one stage")
        if self.stage_upscale < 2:
            raise DataError("per-stage upscale factor must be at least 2")
        if self.later_rate_scale <= 0.0:
            raise DataError("later_rate_scale must be positive")
        if self.common_only and self.hf_only:
            raise DataError("common_only and hf_only are mutually exclusive")

    @property
    def total_upscale(self):
        return self.stage_upscale ** self.n_stages

    @property
    def output_px_iod(self):
        return self.input_px_iod * self.total_upscale

    def forced_gate(self):
        if self.common_only:
            return 0.0
        if self.hf_only:
            return 1.0
        return None


@dataclass
class CascadeModel:
    config: CascadeConfig
    shape_model: ShapeModel
    templates: list          # K+1 templates, scale ladder from input pxIOD
    regressors: list         # K stage regressors ([] when correspondence frozen)
    nets: list               # K gated nets
    priors: list             # K channel stacks, one per stage output scale

    @property
    def n_stages(self):
        return self.config.n_stages


@dataclass
class StageTrace:
    p: np.ndarray
    update: np.ndarray
    landmarks: np.ndarray
    upscaled: np.ndarray
    gate: np.ndarray
    residual: np.ndarray
    image: np.ndarray


@dataclass
class TraceRecord:
    aligned_input: np.ndarray
    transform: SimilarityTransform
    p0: np.ndarray
    stages: list

    @property
    def final_aligned(self):
        """Final template-frame estimate, clamped to the valid range."""
        return np.clip(self.stages[-1].image, 0.0, 1.0)


def back_project(hi, lo, iters=3, step=1.0):
    """Nudge hi towards downsample-consistency with lo.

    Repeats hi <- hi + step * up(lo - down(hi)) with bicubic resizing.
    iters = 0 returns the input unchanged.
    """
    hi = np.asarray(hi, dtype=np.float64).copy()
    lo = np.asarray(lo, dtype=np.float64)
    if iters < 0:
        raise DataError("back-projection iteration count must be >= 0")
    for _ in range(int(iters)):
        down = resize_bicubic(hi, out_shape=lo.shape)
        hi += step * resize_bicubic(lo - down, out_shape=hi.shape)
    return hi


def build_templates(model: ShapeModel, config: CascadeConfig):
    """The template ladder: input resolution plus one per stage output."""
    base = make_template(model, config.input_px_iod,
                         margin=config.template_margin)
    out = [base]
    for k in range(1, config.n_stages + 1):
        out.append(scale_template(base, config.stage_upscale ** k))
    return out


def _stage_net_config(config: CascadeConfig, stage_index):
    depth = (config.branch_depth_first if stage_index == 0
             else config.branch_depth_later)
    scale = 1.0 if stage_index == 0 else config.later_rate_scale
    return NetConfig(prior_channels=config.prior.channels,
                     branch_depth=depth, branch_width=config.branch_width,
                     gate_depth=config.gate_depth,
                     gate_width=config.gate_width,
                     rate_scale=scale)


def _warped_prior(template: MeanTemplate, channels, p):
    field_k = eval_warp(template, p)
    return warp_template_to_image(channels, template.mask, field_k,
                                  template.shape)


def _apply_net(net, up, warped_prior):
    res = forward(net, up[None, None], warped_prior[None])
    return res.g.data[0, 0], res.g_lambda.data[0, 0]


def align_to_template(image, eyes, template: MeanTemplate):
    """similarity_init wrapper taking an (eye_left, eye_right) pair."""
    left, right = eyes
    return similarity_init(np.asarray(image, dtype=np.float64),
                           np.asarray(left, dtype=np.float64),
                           np.asarray(right, dtype=np.float64), template)


def hallucinate(model: CascadeModel, low_img, eyes):
    """Run the full cascade on one low-res face.

    ``eyes`` are the (left, right) eye centers in the input image. Returns
    the hallucinated image mapped back to the input frame at the total
    upscale factor, plus a per-stage trace.
    """
    cfg = model.config
    left, right = eyes
    dist = float(np.hypot(*(np.asarray(right, dtype=np.float64) -
                            np.asarray(left, dtype=np.float64))))
    if dist < 1e-9:
        raise DegenerateInputError("coincident eyes")
    if dist < 0.8 * cfg.input_px_iod:
        raise DataError(
            f"input face too small: {dist:.2f} px eye distance vs "
            f"configured {cfg.input_px_iod:.2f}")
    aligned, tf = align_to_template(low_img, eyes, model.templates[0])
    p = np.zeros(cfg.n_bases)
    img = aligned
    force = cfg.forced_gate()
    stages = []
    for k in range(1, cfg.n_stages + 1):
        t_in = model.templates[k - 1]
        t_out = model.templates[k]
        update = np.zeros_like(p)
        if not cfg.freeze_correspondence and model.regressors:
            new_p = predict_update(model.regressors[k - 1], img, p, t_in,
                                   cfg.regressor.feature)
            update = new_p - p
            p = new_p
        up = resize_bicubic(img, out_shape=t_out.shape)
        prior_w = _warped_prior(t_out, model.priors[k - 1], p)
        net = model.nets[k - 1]
        saved = net.force_gate
        net.force_gate = force if force is not None else saved
        try:
            residual, gate = _apply_net(net, up, prior_w)
        finally:
            net.force_gate = saved
        out = up + residual
        if cfg.back_projection:
            # anchor every stage to the observed input, not the previous
            # estimate, so stage errors cannot accumulate into the constraint
            out = back_project(out, aligned, cfg.bp_iters, cfg.bp_step)
        stages.append(StageTrace(p=p.copy(), update=update,
                                 landmarks=landmarks_from_coeffs(t_out, p),
                                 upscaled=up, gate=gate, residual=residual,
                                 image=out))
        img = out
    trace = TraceRecord(aligned_input=aligned, transform=tf,
                        p0=np.zeros(cfg.n_bases), stages=stages)
    return _map_back(trace.final_aligned, tf, np.asarray(low_img).shape,
                     cfg.total_upscale), trace


def _map_back(final_aligned, tf, low_shape, factor):
    """Invert the initial similarity at the output scale."""
    h, w = low_shape
    oh, ow = h * factor, w * factor
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xs, ys], axis=-1).astype(np.float64)
    in_coords = (pts - (factor - 1) / 2.0) / factor
    t0_coords = tf.apply(in_coords)
    tk = scale_coords(t0_coords.reshape(-1, 2), factor).reshape(t0_coords.shape)
    out = bicubic_sample(final_aligned, tk[..., 1], tk[..., 0])
    return np.clip(out, 0.0, 1.0)


def _ground_truth_ladder(image, eyes, templates):
    """Per-scale ground truth for one face.

    The input rung goes through the antialiased degradation resampler and a
    (near unit-scale) alignment -- the same path evaluation inputs take --
    so training inputs carry no sampling alias. The finest rung is the
    aligned source; intermediate rungs are bicubic downsamples of it, so the
    ladder telescopes exactly: shrinking rung k+1 by the stage factor
    reproduces rung k instead of a slightly different resampling of the
    original.
    """
    left = np.asarray(eyes[0], dtype=np.float64)
    right = np.asarray(eyes[1], dtype=np.float64)
    iod = float(np.hypot(*(right - left)))
    final = align_to_template(image, (left, right), templates[-1])[0]
    out = []
    for i, t in enumerate(templates):
        if i == len(templates) - 1:
            out.append(final)
        elif i == 0:
            if iod > t.px_iod * (1.0 + 1e-9):
                res = degrade(image, eyes=np.stack([left, right]),
                              target_px_iod=t.px_iod)
                out.append(align_to_template(
                    res.image, (res.eyes[0], res.eyes[1]), t)[0])
            else:
                out.append(align_to_template(image, (left, right), t)[0])
        else:
            out.append(resize_bicubic(final, out_shape=t.shape))
    return out


def train_cascade(annotated, config: CascadeConfig, faces=None, rng=None):
    """Train the full cascade on high-res faces with landmark annotations.

    ``annotated`` holds (image, landmarks) pairs used for the shape model,
    regressors, and prior. ``faces`` optionally supplies a separate
    (image, eyes) set for network training; by default the annotated images
    are reused. Training rolls each stage's own predictions forward so later
    stages see realistic inputs.
    """
    cfg = config
    if not annotated:
        raise DataError("training needs annotated faces")
    rng = rng or np.random.default_rng(cfg.seed)
    shapes = [lms for _, lms in annotated]
    model = build_shape_model(shapes, cfg.n_bases)
    templates = build_templates(model, cfg)
    t_final = templates[-1]

    shared = faces is None
    if shared:
        faces = [(img, eye_centers(lms)) for img, lms in annotated]

    # aligned ground-truth ladder and coefficients for the annotated set
    ann_eyes = [eye_centers(lms) for _, lms in annotated]
    ann_ladders = [_ground_truth_ladder(img, e, templates)
                   for (img, _), e in zip(annotated, ann_eyes)]
    ann_phat = []
    for (img, lms), e in zip(annotated, ann_eyes):
        _, tf = align_to_template(img, e, t_final)
        ann_phat.append(fit_coeffs(t_final, tf.apply(lms)))

    face_ladders = ann_ladders if shared else \
        [_ground_truth_ladder(img, e, templates) for img, e in faces]

    # the detail prior: residual statistics at the final scale, ground-truth
    # correspondence, rescaled to every intermediate template
    prior_pairs = []
    for ladder, p_hat in zip(ann_ladders, ann_phat):
        field_k = eval_warp(t_final, p_hat)
        prior_pairs.append((ladder[-1], ladder[0], field_k))
    prior_final = build_prior(prior_pairs, t_final, cfg.prior)
    priors = [prior_final if k == cfg.n_stages else
              rescale_channels(prior_final, templates[k].shape)
              for k in range(1, cfg.n_stages + 1)]

    regressors = []
    nets = []
    ann_imgs = [ladder[0] for ladder in ann_ladders]
    ann_p = [np.zeros(cfg.n_bases) for _ in annotated]
    face_imgs = [ladder[0] for ladder in face_ladders]
    face_p = [np.zeros(cfg.n_bases) for _ in faces]
    ann_in0 = list(ann_imgs)       # back-projection anchors (stage inputs)
    face_in0 = ann_in0 if shared else list(face_imgs)
    force = cfg.forced_gate()

    def roll(imgs, anchors, ps, net, t_out, prior_k):
        """Push a working set through one trained stage. ``anchors`` holds
        the original input images the back-projection stays consistent
        with."""
        out_imgs = []
        for img, anc, p in zip(imgs, anchors, ps):
            up = resize_bicubic(img, out_shape=t_out.shape)
            prior_w = _warped_prior(t_out, prior_k, p)
            residual, _ = _apply_net(net, up, prior_w)
            out = up + residual
            if cfg.back_projection:
                out = back_project(out, anc, cfg.bp_iters, cfg.bp_step)
            out_imgs.append(out)
        return out_imgs

    for k in range(1, cfg.n_stages + 1):
        t_in = templates[k - 1]
        t_out = templates[k]

        if not cfg.freeze_correspondence:
            samples = [(img, p_hat, p_cur) for img, p_hat, p_cur in
                       zip(ann_imgs, ann_phat, ann_p)]
            stage = train_stage(samples, t_in, cfg.regressor, rng)
            regressors.append(stage)
            ann_p = [predict_update(stage, img, p, t_in,
                                    cfg.regressor.feature)
                     for img, p in zip(ann_imgs, ann_p)]
            face_p = ann_p if shared else \
                [predict_update(stage, img, p, t_in, cfg.regressor.feature)
                 for img, p in zip(face_imgs, face_p)]

        net = GatedSRNet(_stage_net_config(cfg, k - 1), rng)
        net.force_gate = force
        dataset = []
        for img, p, ladder in zip(face_imgs, face_p, face_ladders):
            up = resize_bicubic(img, out_shape=t_out.shape)
            prior_w = _warped_prior(t_out, priors[k - 1], p)
            dataset.append((up, prior_w, ladder[k]))
        train_three_step(net, dataset, cfg.schedule, rng)
        nets.append(net)

        if k < cfg.n_stages:   # the last stage's outputs have no consumer
            face_imgs = roll(face_imgs, face_in0, face_p, net, t_out,
                             priors[k - 1])
            if not cfg.freeze_correspondence:
                ann_imgs = face_imgs if shared else \
                    roll(ann_imgs, ann_in0, ann_p, net, t_out, priors[k - 1])

    return CascadeModel(config=cfg, shape_model=model, templates=templates,
                        regressors=regressors, nets=nets, priors=priors)
