"""Federated 3D segmentation with frequency-space style sharing, at desk scale."""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, NotFoundError, UndefinedMetricError
from .federation import Augmentation, FederationConfig, fedavg, run_federation, traffic_report
from .metrics import MetricTable, asd, dsc, evaluate_model
from .phantom import PhantomSpec, generate_client_dataset, make_out_of_federation_client
from .segmodel import SegModel, forward, init_model, loss_and_grad, predict, sgd_step
from .spectral import apply_style, extract_style, fft3, ifft3
from .stylebank import StyleBank, register_client_styles, retrieve_style
from .volume import SubVolume, Volume
