import hashlib
import os

import pytest

from dcrlab.config import RunConfig
from dcrlab.harness import ensure_teacher


def tiny_config(tmp, **changes) -> RunConfig:
    base = dict(train_size=256, val_size=128, epochs=2, batch_size=32, eval_points=4, teacher_epochs=6,
                out_dir=str(tmp), teacher_path=str(tmp / "teacher.ckpt"))
    base.update(changes)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory):
    """A briefly trained teacher on a small split, shared across the session."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root)
    model, acc = ensure_teacher(cfg)
    return cfg, model, acc


@pytest.fixture(scope="session")
def full_teacher(request):
    """Teacher at the default configuration, cached across sessions."""
    cache = request.config.cache.mkdir("dcrlab_teacher")
    key = hashlib.sha1(RunConfig().to_text().encode()).hexdigest()[:12]
    cfg = RunConfig(teacher_path=os.path.join(str(cache), f"teacher-{key}.ckpt"), out_dir=str(cache))
    model, acc = ensure_teacher(cfg)
    return cfg, model, acc
