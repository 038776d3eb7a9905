#pragma once

#include <string>
#include <vector>

#include "diffaug/nn.hpp"

namespace diffaug {

struct BackboneConfig {
    int image_size = 32;
    int base_channels = 64;
    std::vector<int> channel_multipliers{1, 2, 4};
    int blocks_per_level = 2;
    int embedding_dim = 0;  // 0 resolves to 4 * base_channels
    int se_reduction = 16;
    int attention_heads = 4;
    int class_count = 0;
    double dropout = 0.1;
    int norm_groups = 8;
    std::vector<int> attention_resolutions{16, 8};

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int resolved_embedding_dim() const { return embedding_dim > 0 ? embedding_dim : 4 * base_channels; }
    bool attention_at(int resolution) const;
    void validate() const;
};

// First dim/2 entries sin(t * w_i), last dim/2 cos(t * w_i),
// w_i = 10000^(-2i/dim).
Tensor sinusoidal_embedding(int t, int dim);

// Class-conditional SE U-Net noise predictor. Layer descriptors are fixed by
// the config; weights live in a ParameterStore.
class DenoiserUNet {
  public:
    explicit DenoiserUNet(BackboneConfig cfg);

    void init_params(ParameterStore& ps, Rng& rng) const;

    // x: (N,1,S,S); t, y per sample (y = -1 means unconditional).
    // T bounds the timestep check; dropout_rng is consumed only in training
    // graphs.
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, const std::vector<int>& t,
                    const std::vector<int>& y, int T, Rng& dropout_rng) const;

    // Convenience no-grad evaluation.
    Tensor forward_eval(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t,
                        const std::vector<int>& y, int T) const;

    const BackboneConfig& config() const { return cfg_; }

  private:
    // Conditioning vector rows: time MLP over sinusoidal embedding plus
    // learned class embedding.
    ad::Ref condition(ad::Graph& g, const ParameterStore& ps, const std::vector<int>& t,
                      const std::vector<int>& y, int T) const;

    BackboneConfig cfg_;
    nn::Conv stem_;
    std::vector<nn::SEResBlock> enc_blocks_;
    std::vector<nn::LinearAttention> enc_attn_;  // parallel to enc_blocks_; channels 0 = none
    std::vector<nn::Conv> downs_;
    nn::SEResBlock mid_block1_, mid_block2_;
    nn::GroupNorm mid_attn_norm_;
    nn::MultiHeadSelfAttention mid_attn_;
    std::vector<nn::SEResBlock> dec_blocks_;
    std::vector<nn::LinearAttention> dec_attn_;
    std::vector<nn::Conv> ups_;
    nn::Linear time_fc1_, time_fc2_;
    nn::Embedding class_embed_;
    nn::GroupNorm out_norm_;
    nn::Conv out_conv_;
};

}  // namespace diffaug
