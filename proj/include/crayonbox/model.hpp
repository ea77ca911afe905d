#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crayonbox/crayon.hpp"
#include "crayonbox/panoptic.hpp"
#include "crayonbox/qlora.hpp"
#include "crayonbox/tensor.hpp"
#include "crayonbox/tokenizer.hpp"

namespace crayonbox {

struct ModelConfig {
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int patch_h = 8;   // image-token grid height h
    int patch_w = 8;   // image-token grid width w
    int connector_d = 64;
    int connector_hidden = 128;
    int max_seq = 320;
    int img_size = 32;
    float init_std = 0.08f;
    float unembed_std = 0.3f;

    // Full-scale reference values; the toy defaults above stand in for them.
    static constexpr int kPaperGridH = 35;
    static constexpr int kPaperGridW = 35;
    static constexpr int kPaperConnectorD = 4096;
    static constexpr int kPaperLoraRank = 64;
    static constexpr float kPaperLoraAlpha = 64.0f;

    int image_tokens() const { return patch_h * patch_w; }
    int patch_pixels() const {
        return (img_size / patch_h) * (img_size / patch_w) * 3;
    }
};

// Question/answer rendered under the prompt protocol:
// "<image> User: {q} Assistant: {a}<stop>", mask on answer tokens + <stop>.
struct EncodedRecord {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;
    int prefix_len = 0;  // tokens before the answer span
};

EncodedRecord encode_example(const std::string& question, const std::string& answer);
std::vector<int> encode_prefix(const std::string& question);  // ends after "Assistant:"

struct TransformerBlock {
    Tensor ln1_gain, ln2_gain;
    Tensor wq, wk, wv, wo;  // dense [d, d]; frozen base once quantized
    std::optional<QLoraLinear> qq, qk, qv, qo;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct VisionEncoder {
    Tensor patch_proj;  // [d_model, patch_pixels]
    Tensor pos2d;       // [h*w, d_model]
};

struct GenerationResult {
    std::vector<int> ids;  // generated tokens, <stop> excluded
    float log_prob = 0.0f;
    bool truncated = false;
};

class Model {
public:
    static Model init(const ModelConfig& cfg, uint64_t seed);

    // Per-patch linear projection plus learned 2-D positional embedding.
    Tensor encode_image(const Tensor& image) const;

    struct ForwardResult {
        Tensor logits;              // [L, vocab]
        std::vector<int> expanded;  // -1 at image rows
        int img_start = -1;
    };
    ForwardResult forward(const std::vector<int>& ids, const Tensor* image,
                          const PanopticGrid* grid) const;

    // Teacher-forced masked loss over answer tokens + <stop>.
    Tensor record_loss(const EncodedRecord& rec, const Tensor* image,
                       const PanopticGrid* grid) const;

    GenerationResult generate(const std::vector<int>& prefix, const Tensor* image,
                              const PanopticGrid* grid, int beam_n = 1,
                              int max_new = 64) const;

    // Replaces the attention projections with NF4 bases + Dual QLoRA adapters.
    void quantize_backbone(int rank, float alpha, uint64_t seed, bool dual);
    bool backbone_quantized() const { return backbone_quantized_; }
    void set_mode(CitMode mode);
    CitMode mode() const { return mode_; }

    // Every dense parameter tensor, stable order, for optimizers/checkpoints.
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<std::pair<std::string, const QuantizedLinear*>> quantized_sections() const;
    void set_all_trainable(bool trainable);
    void set_trainable(const std::vector<std::string>& names, bool trainable);

    const ModelConfig& config() const { return cfg_; }
    CrayonCodebooks& codebooks() { return codebooks_; }
    Connector& connector() { return connector_; }
    VisionEncoder& vision() { return vision_; }
    std::vector<TransformerBlock>& blocks() { return blocks_; }

    bool crayon_on = true;
    CrayonFlags crayon_flags;

private:
    ModelConfig cfg_;
    Tensor tok_emb_;  // [vocab, d]
    Tensor pos_emb_;  // [max_seq, d]
    VisionEncoder vision_;
    std::vector<TransformerBlock> blocks_;
    Tensor final_gain_;
    Tensor unembed_;  // [vocab, d]
    CrayonCodebooks codebooks_;
    Connector connector_;
    CitMode mode_ = CitMode::InferenceBoth;
    bool backbone_quantized_ = false;

    Tensor project(const Tensor& x, const Tensor& dense,
                   const std::optional<QLoraLinear>& q) const;
    Tensor attention(const Tensor& x, const TransformerBlock& blk) const;
};

}  // namespace crayonbox
