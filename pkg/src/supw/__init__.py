"""Superpixel-consistent, selectively whitened lesion segmentation.

A numpy implementation of SLIC superpixels, a superpixel consistency loss,
instance-selective whitening of feature covariances, and a small segmentation
network trained with hand-written backprop.
"""
from .estimator import SuperpixelSegmenter, check_images, check_masks
from .metrics import Confusion, Report, confusion, dataset_report, metrics_from
from .segnet import SegNetwork, build, load_checkpoint, save_checkpoint
from .slic import SlicParams, SlicSuperpixels, SuperpixelGrid, slic_image, slic_run
from .slic_loss import SlicLossConfig, bce, l_sg, l_slic, occupancy
from .train import TrainConfig, fit_arrays, poly_lr, total_loss, train_loop
from .whitening import IswState, SelectiveWhitening, covariance, isw_loss, kmeans_split, pair_variance

__version__ = "0.1.0"

__all__ = [
    "Confusion", "IswState", "Report", "SegNetwork", "SelectiveWhitening", "SlicLossConfig",
    "SlicParams", "SlicSuperpixels", "SuperpixelGrid", "SuperpixelSegmenter", "TrainConfig",
    "bce", "build", "check_images", "check_masks", "confusion", "covariance", "dataset_report",
    "fit_arrays", "isw_loss", "kmeans_split", "l_sg", "l_slic", "load_checkpoint", "metrics_from",
    "occupancy", "pair_variance", "poly_lr", "save_checkpoint", "slic_image", "slic_run",
    "total_loss", "train_loop",
]
