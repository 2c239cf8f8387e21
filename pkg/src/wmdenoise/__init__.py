"""Robust image watermarking with a learned denoising stage."""
