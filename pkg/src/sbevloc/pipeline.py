"""Glue between the stages: frames -> S-BEVs -> training arrays -> bundle.

Frames flow through as (frame_id, pose, depth, labels) tuples whether they
come from the synthetic renderer or from dataset files, so every consumer
is agnostic to the source. S-BEV accumulation uses a sliding window of the
current plus the previous four frames.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import datasets as ds_io
from .config import (
    SEED_AE,
    SEED_BALANCE,
    SEED_INDEX,
    SEED_REG,
    RunConfig,
    derive_seed,
)
from .errors import InputError
from .geometry import Intrinsics, Pose2, camera_to_ego, pose3_from_pose2
from .localizer import (
    AEModel,
    LocalizerBundle,
    RegModel,
    ae_targets,
    build_index,
    embed_vec,
    grid_to_input,
    train_autoencoder,
    train_regressor,
)
from .sbev import (
    ClassPolicy,
    GridSpec,
    SBev,
    accumulate_sbev,
    build_point_cloud,
    filter_labels,
)
from .synthworld import WeatherSpec, World, perturb_weather, render_frame
from .topomap import AugmentConfig, NodeDataset, TopoMap, augment_sample

ACCUMULATION_WINDOW = 5


def ego_cloud(depth, labels, k: Intrinsics, policy: ClassPolicy, grid: GridSpec):
    """Filtered labels + depth -> labeled cloud in the ego frame (camera origin)."""
    kept = filter_labels(labels, policy)
    cam = build_point_cloud(depth, kept, k, stride=grid.stride)
    return camera_to_ego(cam)


def render_stream(world: World, poses, k: Intrinsics,
                  weather: WeatherSpec | None = None, weather_seed: int = 0):
    """Yield (frame_id, pose, depth, labels) for each pose, optionally
    perturbed with a per-frame RNG stream derived from (seed, frame_id)."""
    for frame_id, pose in enumerate(poses):
        depth, labels = render_frame(world, pose, k)
        if weather is not None:
            depth, labels = perturb_weather((depth, labels), weather,
                                            derive_seed(weather_seed, frame_id))
        yield frame_id, pose, depth, labels


def dataset_stream(manifest: ds_io.DatasetManifest):
    """Yield (frame_id, pose, depth, labels) from an on-disk dataset."""
    for i, ref in enumerate(manifest.frames):
        depth, labels = ds_io.load_frame(manifest, i)
        yield ref.frame_id, ref.pose, depth, labels


def sbev_stream(frames, k: Intrinsics, policy: ClassPolicy, grid: GridSpec,
                camera_height: float, window: int = ACCUMULATION_WINDOW):
    """Yield one motion-compensated SBev per incoming frame."""
    recent = deque(maxlen=window)
    for frame_id, pose, depth, labels in frames:
        cloud = ego_cloud(depth, labels, k, policy, grid)
        ego3 = pose3_from_pose2(pose, z=camera_height)
        recent.append((cloud, ego3))
        yield accumulate_sbev(list(recent), ego3, grid,
                              origin=pose, frame_id=frame_id)


@dataclass
class TrainingArrays:
    """Pooled network inputs for the (augmented) balanced training set."""

    inputs: np.ndarray          # (n, in_dim) float32
    node_ids: np.ndarray        # (n,)
    rel_poses: list             # Pose2 per row
    is_original: np.ndarray     # (n,) bool; False for augmented variants
    frame_ids: np.ndarray       # (n,) source frame of each row


def collect_training_arrays(sbevs, samples, aug: AugmentConfig | None,
                            pool: int, grid: GridSpec) -> TrainingArrays:
    """Pool (and optionally augment) the training S-BEVs into flat arrays.

    `sbevs` yields SBev objects in frame order; `samples` is the balanced
    training set. Frames not in the training set are skipped.
    """
    wanted = {}
    for s in samples:
        wanted.setdefault(s.frame_id, []).append(s)
    inputs, ids, poses, orig, fids = [], [], [], [], []
    seen = set()
    for sb in sbevs:
        for s in wanted.get(sb.frame_id, ()):
            seen.add(s.frame_id)
            variants = (augment_sample(sb, s.rel_pose, aug, grid)
                        if aug is not None else [(sb, s.rel_pose)])
            for j, (vsb, vrel) in enumerate(variants):
                inputs.append(grid_to_input(vsb.grid, pool))
                ids.append(s.node_id)
                poses.append(vrel)
                orig.append(j == 0)
                fids.append(s.frame_id)
    missing = {s.frame_id for s in samples} - seen
    if missing:
        raise InputError(f"training frames without S-BEVs: {sorted(missing)[:10]}")
    return TrainingArrays(np.stack(inputs), np.array(ids), poses,
                          np.array(orig), np.array(fids))


def collect_inputs(sbevs, frame_ids, pool: int):
    """Pooled inputs for the given frames, in the order frame_ids lists them."""
    wanted = set(frame_ids)
    got = {}
    for sb in sbevs:
        if sb.frame_id in wanted:
            got[sb.frame_id] = grid_to_input(sb.grid, pool)
    missing = wanted - got.keys()
    if missing:
        raise InputError(f"frames without S-BEVs: {sorted(missing)[:10]}")
    return np.stack([got[f] for f in frame_ids])


@dataclass
class TrainedPipeline:
    bundle: LocalizerBundle
    ae_losses: list
    reg_losses: list
    arrays: TrainingArrays = field(repr=False, default=None)


def train_localizer(topo: TopoMap, arrays: TrainingArrays, mode: str,
                    cfg: RunConfig, seed: int) -> TrainedPipeline:
    """Train AE + regressor for one ablation mode from prepared arrays.

    BASE uses everything with node-average targets; AVG reconstructs each
    input instead; AUG drops the augmented variants.
    """
    if mode == "AUG" or not cfg.augment.enabled:
        keep = arrays.is_original
    else:
        keep = np.ones(len(arrays.inputs), dtype=bool)
    inputs = arrays.inputs[keep]
    node_ids = arrays.node_ids[keep]
    rel_poses = [p for p, k in zip(arrays.rel_poses, keep) if k]

    orig_mask = arrays.is_original[keep]
    targets = ae_targets(inputs, node_ids, mode,
                         node_inputs=inputs[orig_mask],
                         node_input_ids=node_ids[orig_mask])
    ae_cfg = cfg.ae.train.train_config(derive_seed(seed, SEED_AE))
    ae, ae_losses = train_autoencoder(inputs, targets, ae_cfg, mode=mode,
                                      hidden=cfg.ae.hidden,
                                      latent_dim=cfg.ae.latent_dim,
                                      pool=cfg.ae.pool,
                                      activation=cfg.ae.activation)
    latents = embed_batched(ae, inputs)
    index = build_index(latents, node_ids,
                        max_per_node=cfg.eval.index_max_per_node,
                        seed=derive_seed(seed, SEED_INDEX))
    reg_cfg = cfg.reg.train.train_config(derive_seed(seed, SEED_REG),
                                         loss_weights=cfg.reg.loss_weights)
    reg, reg_losses = train_regressor(latents, node_ids, rel_poses, len(topo),
                                      reg_cfg, hidden=cfg.reg.hidden,
                                      dropout=cfg.reg.dropout)
    bundle = LocalizerBundle(topo, ae, reg, index)
    bundle.validate()
    return TrainedPipeline(bundle, ae_losses, reg_losses, arrays)


def embed_batched(ae: AEModel, inputs: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = [embed_vec(ae, inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# dataset directory writer (the cmd_synth body)

def write_synth_dataset(out_dir, world: World, k: Intrinsics) -> int:
    """Render every route pose to depth/label PGMs plus poses.csv/world.json."""
    import os

    from .synthworld import write_world

    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    samples = []
    for frame_id, pose, depth, labels in render_stream(world, world.route, k):
        name = ds_io.frame_name(frame_id)
        ds_io.write_depth_pgm(os.path.join(out_dir, "depth", name), depth)
        ds_io.write_label_pgm(os.path.join(out_dir, "labels", name), labels)
        t = frame_id * world.spec.frame_spacing / world.spec.speed
        samples.append(ds_io.TrajectorySample(frame_id, t, pose))
    ds_io.write_trajectory(os.path.join(out_dir, "poses.csv"), samples)
    write_world(os.path.join(out_dir, "world.json"), world)
    ds_io.write_format_manifest(out_dir)
    return len(samples)
