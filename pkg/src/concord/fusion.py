"""Three-stage multimodal training: non-image model, image aggregator, then a
Cox fusion head over features extracted from both frozen branches."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .attention import EmbeddingBag, TransformerConfig, TransformerParams, aggregate_batch, fit_aggregator
from .cox import CoxParams, fit_cox, predict_risk
from .errors import SchemaMismatch, UntrainedComponent
from .neural import DenseConfig, DenseNetParams, fit_dense, forward
from .survival_stats import SurvivalRecord

MODES = ("early", "late")
NONIMAGE_KINDS = ("cox", "mlp_relu", "snn_selu")

NonImageModel = Union[CoxParams, DenseNetParams]


@dataclass(frozen=True)
class FusionConfig:
    nonimage_mode: str = "late"
    image_mode: str = "late"
    nonimage_kind: str = "cox"
    fusion_l1: float = 0.0
    fusion_l2: float = 0.1
    nonimage_l1: float = 0.0
    nonimage_l2: float = 0.1
    dense: Optional[DenseConfig] = None
    transformer: Optional[TransformerConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.nonimage_mode not in MODES or self.image_mode not in MODES:
            raise ValueError(f"fusion modes must be in {MODES}")
        if self.nonimage_kind not in NONIMAGE_KINDS:
            raise ValueError(f"unknown non-image model {self.nonimage_kind!r}")
        if self.nonimage_kind != "cox" and self.dense is None:
            object.__setattr__(self, "dense", DenseConfig(kind=self.nonimage_kind, val_fraction=0.2))
        if self.dense is not None and self.dense.kind != self.nonimage_kind and self.nonimage_kind != "cox":
            raise ValueError("dense config kind disagrees with nonimage_kind")

    @property
    def label(self) -> str:
        return f"{self.nonimage_mode} nonimage + {self.image_mode} image"

    # stage seeds derive from one master seed by fixed offsets
    @property
    def nonimage_seed(self) -> int:
        return self.seed + 1

    @property
    def image_seed(self) -> int:
        return self.seed + 2

    @property
    def fusion_seed(self) -> int:
        return self.seed + 3


def fusion_configs(**kw) -> list[FusionConfig]:
    """The four (non-image mode x image mode) scenarios."""
    return [
        FusionConfig(nonimage_mode=a, image_mode=b, **kw)
        for a, b in (("late", "late"), ("late", "early"), ("early", "late"), ("early", "early"))
    ]


@dataclass(frozen=True)
class MultimodalModel:
    nonimage: NonImageModel
    image: TransformerParams
    fusion: CoxParams
    config: FusionConfig
    fusion_names: tuple = field(default=())


def fusion_feature_names(nonimage: NonImageModel, image: TransformerParams, config: FusionConfig) -> tuple[str, ...]:
    names = []
    if config.nonimage_mode == "late":
        names.append("nonimage_risk")
    elif isinstance(nonimage, CoxParams):
        names.extend(f"nonimage:{n}" for n in nonimage.standardizer.kept_names)
    else:
        names.extend(f"nonimage_h{j}" for j in range(nonimage.config.hidden[-1]))
    if config.image_mode == "late":
        names.append("image_risk")
    else:
        names.extend(f"image_e{j}" for j in range(image.config.out_dim))
    return tuple(names)


def extract_fusion_features(
    nonimage: Optional[NonImageModel],
    image: Optional[TransformerParams],
    features,
    bags: Sequence[EmbeddingBag],
    config: FusionConfig,
) -> np.ndarray:
    """Fusion-layer inputs for each patient, computed in inference mode.

    Late mode contributes a branch's risk score. Early mode contributes the
    last hidden layer of a dense net, the standardized covariates of a
    linear Cox model, or the 32-dimensional patient embedding.
    """
    if nonimage is None or image is None:
        raise UntrainedComponent("both unimodal branches must be trained before fusion")
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] != len(bags):
        raise SchemaMismatch(f"{X.shape[0]} feature rows for {len(bags)} bags")

    if isinstance(nonimage, CoxParams):
        ni = predict_risk(nonimage, X)[:, None] if config.nonimage_mode == "late" else nonimage.transform(X)
    else:
        risk, hidden = forward(nonimage, X)
        ni = risk[:, None] if config.nonimage_mode == "late" else hidden
    emb, img_risk = aggregate_batch(image, list(bags))
    im = img_risk[:, None] if config.image_mode == "late" else emb
    return np.hstack([ni, im])


def fit_nonimage(features, records: Sequence[SurvivalRecord], config: FusionConfig, feature_names=None, binary=None) -> NonImageModel:
    if config.nonimage_kind == "cox":
        return fit_cox(
            features, records, config.nonimage_l1, config.nonimage_l2,
            seed=config.nonimage_seed, feature_names=feature_names, binary=binary,
        )
    return fit_dense(features, records, config.dense, seed=config.nonimage_seed, feature_names=feature_names, binary=binary)


def fit_fusion_head(nonimage, image, features, bags, records, config: FusionConfig) -> MultimodalModel:
    """Stage 3 only: both branches stay frozen."""
    F = extract_fusion_features(nonimage, image, features, bags, config)
    names = fusion_feature_names(nonimage, image, config)
    # fusion inputs pass through unscaled; constant columns are still dropped
    head = fit_cox(
        F, records, config.fusion_l1, config.fusion_l2, seed=config.fusion_seed,
        feature_names=names, binary=np.ones(F.shape[1], dtype=bool),
    )
    return MultimodalModel(nonimage, image, head, config, names)


def train_multimodal(
    features,
    bags: Sequence[EmbeddingBag],
    records: Sequence[SurvivalRecord],
    config: FusionConfig,
    feature_names: Optional[Sequence[str]] = None,
    binary=None,
    nonimage: Optional[NonImageModel] = None,
    image: Optional[TransformerParams] = None,
) -> MultimodalModel:
    """Fit the non-image branch, then the aggregator, then the fusion head.

    Already-trained branches may be passed in to skip their stage.
    """
    ids = [r.patient_id for r in records]
    if [b.patient_id for b in bags] != ids:
        raise SchemaMismatch("bags are not aligned with records")
    if nonimage is None:
        nonimage = fit_nonimage(features, records, config, feature_names, binary)
    if image is None:
        tconf = config.transformer or TransformerConfig(d_in=bags[0].d_in)
        image = fit_aggregator(bags, records, tconf, seed=config.image_seed)
    return fit_fusion_head(nonimage, image, features, bags, records, config)


def predict_multimodal(model: MultimodalModel, features, bags: Sequence[EmbeddingBag]) -> np.ndarray:
    F = extract_fusion_features(model.nonimage, model.image, features, bags, model.config)
    return predict_risk(model.fusion, F)


def with_fusion_beta(model: MultimodalModel, beta) -> MultimodalModel:
    """Copy of ``model`` whose fusion head uses the given coefficients."""
    beta = np.array(beta, dtype=float)
    beta.setflags(write=False)
    return replace(model, fusion=replace(model.fusion, beta=beta))
