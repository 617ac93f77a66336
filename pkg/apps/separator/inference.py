"""
Separation service: mixture waveform + per-source visual cues → masks and
separated waveforms.
"""
from dataclasses import dataclass

import numpy as np

from apps.dsp.engine import analyse, reconstruct
from apps.dsp.signals import Mask, Waveform
from apps.separator.network import IQueryNet
from apps.separator.queries import assign_queries
from apps.tensorcore.tensor import no_grad


@dataclass(frozen=True, eq=False)
class SourceCue:
    """What the video side observes for one source."""
    object_feature: np.ndarray      # C_O
    motion_feature: np.ndarray      # C_M × T′
    class_id: int = None


@dataclass(frozen=True, eq=False)
class SeparationResult:
    masks: np.ndarray               # every query column: columns × F × T
    query_indices: list             # column used for each source
    source_masks: list              # Mask per source
    waveforms: list                 # Waveform per source


def network_features(mixture: Waveform):
    """Mixture spectrogram and the log1p log-frequency magnitude fed to the U-Net."""
    spec, logmag = analyse(mixture)
    return spec, logmag.log1p()


def model_forward(net: IQueryNet, mixture: Waveform, cues, query_indices=None,
                  rng: np.random.Generator = None) -> SeparationResult:
    """
    Full inference pass. Query indices default to the net's assignment
    policy applied to the cues' class ids.
    """
    cues = list(cues)
    if query_indices is None:
        query_indices = assign_queries(net.queries, [c.class_id for c in cues], net.config.assignment, rng)
    spec, features = network_features(mixture)
    with no_grad():
        out = net(features, [c.object_feature for c in cues], [c.motion_feature for c in cues], query_indices)
    masks = np.asarray(out.masks.data, dtype=np.float64)
    source_masks = [Mask(masks[q]) for q in query_indices]
    waveforms = [reconstruct(spec, mask, len(mixture)) for mask in source_masks]
    return SeparationResult(masks, list(query_indices), source_masks, waveforms)


def separate_mixture(net: IQueryNet, mixture: Waveform, cues, seed: int = None) -> SeparationResult:
    return model_forward(net, mixture, cues, rng=np.random.default_rng(seed))
