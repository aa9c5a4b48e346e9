"""Attribute-preserving thermal-to-visible face synthesis at desk scale.

Building blocks (compact bilinear fusion, U-net generator, two-stream patch
discriminator, attribute predictor, losses), a synthetic paired corpus,
a deterministic training harness and a verification protocol.
"""

from .attributes import (
    AttributeNet,
    AttrNetConfig,
    attribute_feature,
    predict_attributes,
    sign_accuracy,
    train_attribute_predictor,
)
from .data import (
    ATTRIBUTE_NAMES,
    Corpus,
    PairedSample,
    load_corpus,
    load_image,
    make_corpus,
    preprocess,
    render_face,
    save_corpus,
    split_protocol,
    stack,
)
from .discriminator import (
    DiscriminatorConfig,
    TripletPairDiscriminator,
    build_discriminator,
    discriminator_loss,
    score,
)
from .errors import FormatError, NonFiniteLossError, PreconditionError
from .evaluation import (
    RocReport,
    compute_roc,
    evaluate_protocol,
    manipulate_attribute,
    manipulation_rates,
    match_score,
    run_ablation,
)
from .generator import GeneratorConfig, UNetGenerator, build_generator, generate
from .losses import (
    FeatureExtractorSpec,
    LossWeights,
    adversarial_g_loss,
    attribute_loss,
    feature_loss,
    l1_loss,
    total_generator_loss,
)
from .mcb import CountSketchPlan, MCBFusion, count_sketch, make_sketch_plan, mcb_pool
from .training import Checkpoint, TrainConfig, load_attribute_net, save_attribute_net, train

__version__ = "0.1.0"
