#pragma once

#include <string>
#include <vector>

#include "diffaug/backbone.hpp"
#include "diffaug/nn.hpp"

namespace diffaug {

// ---------------------------------------------------------------------------
// Guidance classifier: an encoder mirroring the denoiser's downsampling path
// with the same sinusoidal time conditioning, pooled to K logits.
// ---------------------------------------------------------------------------

struct GuidanceConfig {
    int image_size = 32;
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    int blocks_per_level = 1;
    int embedding_dim = 0;  // 0 resolves to 4 * base_channels
    int se_reduction = 8;
    int class_count = 0;
    double dropout = 0.1;
    int norm_groups = 8;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int resolved_embedding_dim() const { return embedding_dim > 0 ? embedding_dim : 4 * base_channels; }
    void validate() const;
};

class GuidanceClassifier {
  public:
    explicit GuidanceClassifier(GuidanceConfig cfg);

    void init_params(ParameterStore& ps, Rng& rng) const;

    // x: (N,1,S,S), t per sample; returns logits (N,K).
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, const std::vector<int>& t, int T,
                    Rng& dropout_rng) const;

    Tensor logits_eval(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t, int T) const;

    // grad_{x} sum_i log softmax(forward(x,t))[y_i]; rows are independent, so
    // this is the per-sample gradient stacked over the batch.
    Tensor log_prob_grad(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t,
                         const std::vector<int>& y, int T) const;

    const GuidanceConfig& config() const { return cfg_; }

  private:
    GuidanceConfig cfg_;
    nn::Linear time_fc1_, time_fc2_;
    nn::Conv stem_;
    std::vector<nn::SEResBlock> blocks_;
    std::vector<nn::Conv> downs_;
    nn::GroupNorm head_norm_;
    nn::Linear head_;
};

// ---------------------------------------------------------------------------
// Downstream recognition families.
// ---------------------------------------------------------------------------

enum class Family { residual, dense, plainconv, patch_transformer };
enum class DepthPreset { desk, paper };

Family family_from_string(const std::string& s);
DepthPreset preset_from_string(const std::string& s);
const char* to_string(Family f);
const char* to_string(DepthPreset p);

struct DownstreamModelSpec {
    Family family = Family::residual;
    DepthPreset preset = DepthPreset::desk;
    int class_count = 0;
    int input_size = 32;
};

struct Prediction {
    int predicted_class = 0;
    double confidence = 0.0;
    std::vector<double> probabilities;
};

// Topology is a pure function of the spec. forward() yields logits; the
// "penultimate" named layer (pooled features before the head) is exposed for
// feature extraction.
class DownstreamModel {
  public:
    explicit DownstreamModel(DownstreamModelSpec spec);

    void init_params(ParameterStore& ps, Rng& rng) const;

    struct Outputs {
        ad::Ref logits;
        ad::Ref penultimate;
    };
    Outputs forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, Rng& dropout_rng) const;

    Tensor logits_eval(const ParameterStore& ps, const Tensor& x) const;
    // Rows of the named layer's activations; errors with UnknownLayer for
    // names other than "penultimate".
    Tensor features_eval(const ParameterStore& ps, const Tensor& x, const std::string& layer) const;
    int feature_dim(const std::string& layer) const;

    std::vector<Prediction> predict_batch(const ParameterStore& ps, const Tensor& x) const;

    // patch_transformer only: patch tokens + class token.
    int token_count() const;

    const DownstreamModelSpec& spec() const { return spec_; }

  private:
    struct ResStage {
        nn::GroupNorm gn1, gn2, gn3;
        nn::Conv conv1, conv2, conv3, skip;
        int cin = 0, cout = 0, stride = 1;
        bool bottleneck = false, has_skip = false;
    };
    struct DenseLayer {
        nn::GroupNorm gn1, gn2;
        nn::Conv conv1, conv2;
        bool bottleneck = false;
    };
    struct Transition {
        nn::GroupNorm gn;
        nn::Conv conv;
    };
    struct EncoderLayer {
        nn::LayerNorm ln1, ln2;
        nn::MultiHeadSelfAttention attn;
        nn::Linear fc1, fc2;
    };

    ad::Ref res_block_forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, const ResStage& s) const;

    DownstreamModelSpec spec_;
    // residual / dense / plainconv shared pieces
    nn::Conv stem_;
    std::vector<ResStage> res_blocks_;
    std::vector<DenseLayer> dense_layers_;
    std::vector<Transition> transitions_;
    std::vector<int> dense_block_sizes_;
    std::vector<nn::Conv> plain_convs_;
    std::vector<nn::GroupNorm> plain_norms_;
    std::vector<int> plain_pool_after_;  // conv indices followed by a 2x pool
    std::vector<nn::Linear> fc_stack_;
    nn::GroupNorm head_norm_;
    nn::Linear head_;
    int feature_width_ = 0;
    double dropout_ = 0.0;
    // patch_transformer pieces
    int patch_ = 4, exp_dim_ = 0, heads_ = 0, tokens_ = 0;
    nn::Conv patch_embed_;
    std::vector<EncoderLayer> encoder_;
    nn::LayerNorm final_ln_;
    std::string cls_token_name_, pos_embed_name_;
};

Prediction predict_confidence(const DownstreamModel& model, const ParameterStore& ps, const Tensor& image);

}  // namespace diffaug
