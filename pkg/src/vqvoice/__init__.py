"""Desk-scale dual-codebook VQ speech toolkit.

Subpackages:
    corpus     -- deterministic synthetic multi-speaker / multi-language corpus
    numerics   -- minimal differentiable-computation kernel (numpy, manual backprop)
    vq         -- vector-quantization codebooks with EMA learning
    model      -- dual-encoder VQ model with autoregressive mu-law decoder
    codeops    -- discrete-code manipulations (speaker swap, mixing, concat, masking)
    evaluate   -- objective evaluation harness (mel distance, probes, oracle recognizer)
    cli        -- experiment driver
"""

__version__ = "0.1.0"
