"""Topic models for mixed-type electronic health records with informative lab missingness."""

__version__ = "0.1.0"

from .corpus import Corpus, Schema, parse_corpus, parse_meta  # noqa: E402,F401
from .errors import (  # noqa: E402,F401
    MixTopicError, ModelFormatError, NumericalError, ParseError, SchemaError, ValidationError,
)
from .estimates import TopicEstimates, infer_mixture, infer_mixtures, point_estimates  # noqa: E402,F401
from .inference import TrainConfig, TrainedModel, train  # noqa: E402,F401
from .modelio import load_model, save_model  # noqa: E402,F401
from .simulate import SimConfig, simulate  # noqa: E402,F401
