"""Small run configurations shared by the pipeline-level tests."""
from dataclasses import replace

from dcap.backbone import BackboneConfig
from dcap.config import EvalConfig, MetaConfig, PretrainConfig, RunConfig, RunSection


def tiny_config(pooling="attpool", mode="dc", seed=0, **meta) -> RunConfig:
    """A 16 px, 8-filter setup on the conftest tiny dataset (6/3/3 classes); runs in seconds."""
    m = dict(iterations=4, tasks_per_batch=2, way=3, shot=1, queries=3, milestones=(6,), val_every=2, val_tasks=10)
    m.update(meta)
    return RunConfig(
        run=RunSection(seed=seed, pooling=pooling),
        backbone=BackboneConfig(filters=(8, 8, 8, 8), input_size=16, channels_in=1),
        pretrain=PretrainConfig(mode=mode, epochs=2, milestones=(1,), batch_size=32),
        meta=MetaConfig(**m),
        eval=EvalConfig(way=3, shot=1, queries=5, tasks=20, seed=7),
    )


def with_meta(config: RunConfig, **kw) -> RunConfig:
    return replace(config, meta=replace(config.meta, **kw))
