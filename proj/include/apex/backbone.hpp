#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "apex/nn.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Multi-scale trunk settings. The backbone is a strided convolutional net
// with n_coarse+1 stages (two 3x3 convs each, ReLU), producing features at
// strides 4, 8, ..., 2^(n_coarse+2). The pixel decoder projects every level
// to d channels, runs r_rounds of full self-attention over the concatenated
// coarse-level tokens (with fixed 2-D sinusoidal position encodings on
// queries/keys), and fuses the finest level top-down.
struct BackboneConfig {
  std::size_t n_coarse = 3;  // coarse levels; total levels = n_coarse + 1
  std::vector<std::size_t> widths = {16, 32, 64, 128};  // per stage
  std::size_t d = 16;        // pixel-embedding channels
  std::size_t r_rounds = 2;  // pixel-decoder self-attention rounds
  std::size_t heads = 4;
};

struct MultiScaleFeatures {
  std::vector<ad::Tensor> levels;  // fine -> coarse, each [C_i, H_i, W_i]
  std::vector<std::size_t> hs, ws;
};

// Per-level d-channel pixel embeddings as token matrices [H_i*W_i, d],
// fine -> coarse. Level 0 is the mask-head feature map; levels 1..n are the
// decoder cross-attention keys.
struct PixelEmbeddings {
  std::size_t d = 0;
  std::vector<ad::Tensor> tokens;
  std::vector<std::size_t> hs, ws;
};

// Runs the conv trunk. image: [3, H, W] with H and W divisible by
// 2^(n_coarse+2); violations raise ShapeError naming the required divisor.
MultiScaleFeatures extract_features(nn::ParamStore& ps,
                                    const std::string& prefix,
                                    const ad::Tensor& image,
                                    const BackboneConfig& cfg);

// Projects every level to d channels, attends jointly over the coarse token
// stack for r_rounds, and produces level 0 by upsample-and-add fusion of
// level 1 onto the projected finest features. r_rounds = 0 degenerates to
// pure per-level projection (plus the level-0 fusion).
PixelEmbeddings decode_pixels(nn::ParamStore& ps, const std::string& prefix,
                              const MultiScaleFeatures& feats,
                              const BackboneConfig& cfg);

}  // namespace apex
