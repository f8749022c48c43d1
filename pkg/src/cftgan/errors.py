"""Exception types shared across the package.

The CLI maps these onto exit codes: data/format problems exit 3,
numeric failures exit 4.
"""


class CftganError(Exception):
    """Base class for all package errors."""


class EmptyCaption(CftganError):
    """Caption has no usable tokens after normalization."""


class DegenerateCorpus(CftganError):
    """Too few distinct word vectors to fit the requested mixture."""


class DimensionMismatch(CftganError):
    """Vector dimensions disagree with the fitted model."""


class RankDeficient(CftganError):
    """Fit corpus has lower rank than the requested projection size."""


class ShapeMismatch(CftganError):
    """Tensor shape disagrees with the configured video geometry."""


class InvalidIteration(CftganError):
    """Iteration counter outside [0, total_iterations]."""


class NonFiniteLoss(CftganError):
    """A training loss came out NaN/Inf; the step was rolled back."""


class CorruptCheckpoint(CftganError):
    """Checkpoint or artifact file failed magic/shape/size validation."""


class ShapeOutOfBounds(CftganError):
    """Synthetic shape cannot stay inside the canvas for all frames."""


class MalformedClip(CftganError):
    """Clip directory is missing files or has unparseable contents."""


class EmptyDataset(CftganError):
    """No loadable clips under the dataset root."""


class TooShort(CftganError):
    """Clip has fewer frames than the augmentation cut length."""


class TooSmall(CftganError):
    """Clip resolution is below the augmentation crop size."""


class EmptyVideo(CftganError):
    """A video volume with zero frames or zero pixels."""


class BudgetExceeded(CftganError):
    """Requested ablation work does not fit the iteration budget."""


class MissingModel(CftganError):
    """Ablation asked to reuse a model that was never trained."""


class IOFailure(CftganError):
    """Filesystem write/read failed."""


class ConfigError(CftganError):
    """Bad key, value, or combination in a run configuration."""
