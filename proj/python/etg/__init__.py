"""Python surface over the C++ talking-head core."""

from _etg import (  # noqa: F401
    HeadModel,
    NumericError,
    ValidationError,
    emotion_score,
    gradcheck,
    lmd,
    psnr,
    read_tensor,
    render_head,
    rodrigues,
    sample_cloud,
    ssim,
    write_tensor,
)

__version__ = "0.1.0"
