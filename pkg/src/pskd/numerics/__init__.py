from .autodiff import GradTape, Var, backward, corrupted_backward
from .functional import DEFAULT_TEMPERATURE, cross_entropy, kl_div, log_softmax_temp, softmax_temp
from .gradcheck import GradCheckReport, finite_diff_check
from .optim import AdamState, adam_init, optimizer_step

__all__ = [
    "AdamState", "DEFAULT_TEMPERATURE", "GradCheckReport", "GradTape", "Var",
    "adam_init", "backward", "corrupted_backward", "cross_entropy", "finite_diff_check",
    "kl_div", "log_softmax_temp", "optimizer_step", "softmax_temp",
]
