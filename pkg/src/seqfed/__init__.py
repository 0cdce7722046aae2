"""Federated sequential recommendation where clients and server exchange
privacy-perturbed item sequences and soft labels instead of model weights."""

from .client import ClientState, build_upload, client_train, exp_mech_probabilities, exp_mech_sample
from .data import Corpus, InteractionSequence, RawInteraction, load_csv, preprocess, synth_corpus
from .errors import CodecError, ConfigError, DimensionError, InputError, PreprocessingError, ProtocolError, SchemaError
from .evaluation import EvalResult, ablation_grid, evaluate
from .messages import DownloadMessage, SoftLabeledSequence, UploadMessage
from .models import ModelConfig, SeqModel, build_model, client_preset, server_preset
from .protocol import CommLedger, ProtocolConfig, RoundReport, comm_summary, local_only_baseline, run_fedavg_baseline, run_ptf
from .server import ServerConfig, ServerState, build_download, recommend, server_train

__all__ = [
    "ClientState", "build_upload", "client_train", "exp_mech_probabilities", "exp_mech_sample",
    "Corpus", "InteractionSequence", "RawInteraction", "load_csv", "preprocess", "synth_corpus",
    "CodecError", "ConfigError", "DimensionError", "InputError", "PreprocessingError", "ProtocolError", "SchemaError",
    "EvalResult", "ablation_grid", "evaluate",
    "DownloadMessage", "SoftLabeledSequence", "UploadMessage",
    "ModelConfig", "SeqModel", "build_model", "client_preset", "server_preset",
    "CommLedger", "ProtocolConfig", "RoundReport", "comm_summary", "local_only_baseline", "run_fedavg_baseline", "run_ptf",
    "ServerConfig", "ServerState", "build_download", "recommend", "server_train",
]
