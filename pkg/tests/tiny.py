"""A tiny on-disk fixture (12 vessel pairs, 25 graded images) and a fast config for it."""

from pathlib import Path

from drseverity.synthetic import write_aptos_fixture, write_drive_fixture

TINY_TOML = """\
[data]
drive_root = "drive"
aptos_root = "aptos"
aptos_labels = "aptos/train.csv"

[preprocess]
patch_size = 64
per_image = 2

[segnet]
base_channels = 8

[segtrain]
learning_rate = 0.003
epochs = 2
max_steps = 12
val_fraction = 0.2

[segment]
tile_stride = 32

[classifier]
backbone = "efficientnet_tiny"
input_size = 64
pretrained = false
num_groups = 8

[clftrain]
learning_rate = 0.003
batch_size = 8
epochs = 2
max_steps = 10
augment = false

[fusiontrain]
epochs = 200
early_stopping_patience = 50
restarts = 2

[split]
test_size = 5

[run]
seed = 0
output_root = "runs"
cache_root = "cache"
"""


def write_tiny(root) -> Path:
    """Write datasets and ``tiny.toml`` under root; returns the config path."""
    root = Path(root)
    write_drive_fixture(root / "drive", n=12, seed=0, size=(128, 128))
    write_aptos_fixture(root / "aptos", per_grade=5, seed=0, size=(128, 128))
    path = root / "tiny.toml"
    path.write_text(TINY_TOML)
    return path
