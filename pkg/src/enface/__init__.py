"""enface: leveled CKKS engine and encrypted patch-CNN face verification."""

from .backend import active_backend
from .ckks import (
    Ciphertext,
    KeySet,
    Plaintext,
    decode,
    decrypt,
    decrypt_to_values,
    encode,
    encrypt,
    he_add,
    he_mul,
    he_rotate,
    he_sub,
    keygen,
    mod_switch_to,
    rescale,
)
from .errors import EnfaceError
from .matcher import (
    L2PolyCoeffs,
    MatchThreshold,
    calibrate_threshold,
    fit_l2_poly,
    he_l2_normalize,
    he_match,
    he_score,
    he_squared_norm,
)
from .model import (
    EncryptedFeature,
    ModelSpec,
    compile_model,
    encrypt_image,
    eval_model,
    eval_pcnn,
    random_container,
    split_patches,
)
from .oracle import diff_encrypted, oracle_forward, oracle_match
from .packing import TensorLayout, feature_layout, multiplex_layout, pack, unpack
from .params import CkksParams, desk_params

__all__ = [
    "CkksParams", "desk_params", "active_backend", "EnfaceError",
    "Plaintext", "Ciphertext", "KeySet",
    "encode", "decode", "encrypt", "decrypt", "decrypt_to_values", "keygen",
    "he_add", "he_sub", "he_mul", "he_rotate", "mod_switch_to", "rescale",
    "TensorLayout", "feature_layout", "multiplex_layout", "pack", "unpack",
    "ModelSpec", "EncryptedFeature", "compile_model", "random_container",
    "split_patches", "encrypt_image", "eval_pcnn", "eval_model",
    "oracle_forward", "oracle_match", "diff_encrypted",
    "L2PolyCoeffs", "MatchThreshold", "fit_l2_poly", "calibrate_threshold",
    "he_squared_norm", "he_l2_normalize", "he_score", "he_match",
]
__version__ = "0.1.0"
