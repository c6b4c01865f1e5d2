"""Frozen-backbone side-network tuning on a small numpy autodiff engine.

Modules:

* ``tensor``: reverse-mode autodiff with an explicit tape and byte accounting.
* ``backbone``: pre-norm encoder-decoder transformer with cached forward states.
* ``read``: recurrent side network that corrects a frozen backbone.
* ``petl``: LoRA, adapter, BitFit, prompt tuning and full tuning baselines.
* ``corrections``: correction-propagation checks and attention Jacobians.
* ``tasks`` / ``trainer``: synthetic sequence tasks and the training loop.
* ``accounting``: parameter, memory and energy reports.
* ``verification`` / ``cli``: the verification suite and ``read-forge`` command.
"""

from .backbone import Backbone, BackboneConfig, load_preset
from .petl import MethodSpec, apply_method
from .read import ReadConfig
from .tasks import TaskSpec, make_task
from .trainer import TrainConfig, train

__all__ = [
    "Backbone", "BackboneConfig", "MethodSpec", "ReadConfig", "TaskSpec", "TrainConfig",
    "apply_method", "load_preset", "make_task", "train",
]
__version__ = "0.1.0"
