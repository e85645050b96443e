"""Zero-trust federated learning simulator for wind power data imputation.

Library layout:

- ``params``      parameter containers, arithmetic, canonical hashing
- ``privacy``     clipping and seed-deterministic Gaussian perturbation
- ``nizk``        Schnorr-style proof of the noise seed
- ``channel``     sparsification, quantization, wire format, encrypt-then-MAC
- ``aggregation`` trust-aware aggregation and robust baselines
- ``model``       attention seq2seq imputer with manual gradients
- ``data``        synthetic wind farms, CSV ingestion, hybrid masks
- ``federation``  client/server round machinery and the experiment loop
- ``evaluation``  attacks, imputation metrics, membership inference
- ``cli``         the ``ztfed`` command-line entry point
"""

from .aggregation import DtaaConfig, TrustReport, dtaa, fedavg, multikrum, trimmed_mean
from .channel import ChannelKey, CompressedParams, CompressionConfig, EncryptedMessage
from .data import HybridMask, MaskConfig, WindDataset, generate_mask, synth_wind
from .evaluation import AttackConfig, MiaConfig, imputation_metrics, mia_evaluate, sign_flip
from .federation import FLConfig, RoundRecord, run_experiment
from .model import AdamState, Mas2sConfig, SeqBatch
from .nizk import GROUP_512, GROUP_2048, GroupParams, NizkProof, NizkSecret, nizk_prove, nizk_verify
from .params import LayerSpec, ModelParams, ParamDigest, digest, flatten, l2_norm, unflatten
from .privacy import DpConfig, clip_params, noise_sigma, perturb, seeded_gaussian_noise

__version__ = "0.1.0"
