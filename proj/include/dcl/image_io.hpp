#pragma once

#include <string>

#include "dcl/tensor.hpp"

namespace dcl {

/// Writes an [H x W x C] image with values in [0,1] as an 8-bit PNG.
/// C = 1 (grayscale) or 3 (RGB). Values are clamped and rounded to the
/// nearest of 256 levels, exactly like quantize_8bit.
void write_png(const std::string& path, const Tensor& image);

/// Reads an 8-bit PNG back as [H x W x C] with values k/255 in [0,1].
/// Accepts grayscale, RGB, and RGBA, non-interlaced.
Tensor read_png(const std::string& path);

/// Values clamped to [0,1] and rounded to the nearest of 256 levels — the
/// exact values an 8-bit export stores. Not differentiated.
Tensor quantize_8bit(const Tensor& x);

/// Peak signal-to-noise ratio in dB between two same-shape images in [0,1]:
/// 10*log10(1/MSE). Identical inputs give +infinity.
double psnr(const Tensor& a, const Tensor& b);

}  // namespace dcl
