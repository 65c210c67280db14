import pytest

from udc.config import load_config

TINY = [
    "data.synthetic.n_patients=120", "data.synthetic.n_diseases=30", "data.synthetic.n_procedures=10",
    "data.synthetic.n_medications=12", "data.text_dim=8",
    "pcm.dim=8", "pcm.n_heads=2", "pcm.n_layers=1",
    "pretrain.epochs=2", "finetune.epochs=2", "pretrain.batch_size=32", "finetune.batch_size=32",
    "drl.dim=8", "drl.hidden=8", "drl.n_heads=2", "drl.levels=2", "drl.codes_per_level=8", "drl.epochs=2",
]


@pytest.fixture
def tiny_cfg():
    def make(*extra, task="diag", seed=0):
        return load_config(preset="desk", overrides=TINY + [f"task={task}", *extra], seed=seed)
    return make
