"""Self-supervised speech representations learned by reconstructing
time-, channel- and magnitude-altered acoustic features."""

from .alteration import AlterationConfig, AlterationRecord, alter, num_time_blocks, specaugment_mask
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import ModelConfig, encode, init_params, preset, reconstruct
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    FormatError,
    IncompatibleError,
    NumericFault,
    TeraError,
    ValidationError,
)
from .features import FeatureKind, FeatureMatrix, cmvn_per_speaker, fbank, load_features, mfcc, save_features
from .pretrain import TrainConfig, lr_at_step, pretrain_run, train_step
from .probes import ProbeReport, ProbeSpec, train_probe
from .rng import Rng
from .transfer import TransferConfig, build_downstream, extract_representation

__version__ = "0.1.0"
