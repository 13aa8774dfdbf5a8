"""Token manifold capacity regularisation for generalized category discovery."""

from .cluster import ClusterResult, cluster_accuracy, estimate_k, hungarian, ss_kmeans
from .data import Dataset, SynthConfig, gen_synthetic, load_embeddings, save_embeddings
from .losses import LossConfig, PrototypeBank, gcd_loss, mtmc_loss
from .runner import RunConfig, evaluate, train
from .spectral import SpectralReport, spectral_report, verify_theory

__version__ = "0.1.0"
