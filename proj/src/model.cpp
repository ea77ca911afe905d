#include "crayonbox/model.hpp"

#include <algorithm>
#include <cmath>

#include "crayonbox/errors.hpp"

namespace crayonbox {

EncodedRecord encode_example(const std::string& question, const std::string& answer) {
    const auto& tok = Tokenizer::instance();
    EncodedRecord rec;
    rec.ids = tok.encode("<image> User: " + question + " Assistant:");
    rec.prefix_len = static_cast<int>(rec.ids.size());
    std::vector<int> ans = tok.encode(answer);
    if (ans.empty()) throw ArgumentError("record has an empty answer");
    rec.ids.insert(rec.ids.end(), ans.begin(), ans.end());
    rec.ids.push_back(tok.stop_id());
    rec.loss_mask.assign(rec.ids.size(), 0);
    for (size_t i = static_cast<size_t>(rec.prefix_len); i < rec.ids.size(); ++i)
        rec.loss_mask[i] = 1;
    return rec;
}

std::vector<int> encode_prefix(const std::string& question) {
    return Tokenizer::instance().encode("<image> User: " + question + " Assistant:");
}

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.d_model % cfg.n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (cfg.img_size % cfg.patch_h != 0 || cfg.img_size % cfg.patch_w != 0)
        throw ConfigError("image size must divide into the patch grid");
    Model m;
    m.cfg_ = cfg;
    const int vocab = Tokenizer::instance().size();
    Rng rng = derive_rng(seed, "model-init");
    const float s = cfg.init_std;
    m.tok_emb_ = Tensor::randn({vocab, cfg.d_model}, rng, s, true);
    m.pos_emb_ = Tensor::randn({cfg.max_seq, cfg.d_model}, rng, s, true);
    m.vision_.patch_proj = Tensor::randn({cfg.d_model, cfg.patch_pixels()}, rng, s, true);
    m.vision_.pos2d = Tensor::randn({cfg.image_tokens(), cfg.d_model}, rng, s, true);
    for (int l = 0; l < cfg.n_layers; ++l) {
        TransformerBlock blk;
        blk.ln1_gain = Tensor::full({cfg.d_model}, 1.0f, true);
        blk.ln2_gain = Tensor::full({cfg.d_model}, 1.0f, true);
        blk.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
        blk.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
        blk.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
        blk.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
        const int hidden = 4 * cfg.d_model;
        blk.mlp_w1 = Tensor::randn({hidden, cfg.d_model}, rng, s, true);
        blk.mlp_b1 = Tensor::zeros({hidden}, true);
        blk.mlp_w2 = Tensor::randn({cfg.d_model, hidden}, rng, s, true);
        blk.mlp_b2 = Tensor::zeros({cfg.d_model}, true);
        m.blocks_.push_back(std::move(blk));
    }
    m.final_gain_ = Tensor::full({cfg.d_model}, 1.0f, true);
    m.unembed_ = Tensor::randn({vocab, cfg.d_model}, rng, cfg.unembed_std, true);
    Rng crng = derive_rng(seed, "crayon-init");
    m.codebooks_ = CrayonCodebooks::init(cfg.connector_d, crng);
    m.connector_ = Connector::init(cfg.connector_d, cfg.connector_hidden, cfg.d_model, crng);
    return m;
}

Tensor Model::encode_image(const Tensor& image) const {
    if (image.shape().size() != 3 || image.dim(2) != 3)
        throw ShapeError("encode_image expects an [H, W, 3] image");
    const int h = cfg_.patch_h, w = cfg_.patch_w;
    if (image.dim(0) % h != 0 || image.dim(1) % w != 0)
        throw ShapeError("image size does not divide into the patch grid");
    const int ph = image.dim(0) / h, pw = image.dim(1) / w;
    const int pp = ph * pw * 3;
    std::vector<float> patches(static_cast<size_t>(h) * w * pp);
    const int img_w = image.dim(1);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            float* dst = patches.data() + (static_cast<size_t>(i) * w + j) * pp;
            for (int r = 0; r < ph; ++r)
                for (int c = 0; c < pw; ++c)
                    for (int ch = 0; ch < 3; ++ch)
                        *dst++ = image.data()[((static_cast<size_t>(i * ph + r) * img_w) +
                                               (j * pw + c)) * 3 + ch];
        }
    }
    Tensor patch_mat({h * w, pp}, std::move(patches));
    return add(matmul_nt(patch_mat, vision_.patch_proj), vision_.pos2d);
}

Tensor Model::project(const Tensor& x, const Tensor& dense,
                      const std::optional<QLoraLinear>& q) const {
    if (backbone_quantized_) return qlora_forward(x, *q, mode_);
    return matmul_nt(x, dense);
}

Tensor Model::attention(const Tensor& x, const TransformerBlock& blk) const {
    const int dh = cfg_.d_model / cfg_.n_heads;
    Tensor q = project(x, blk.wq, blk.qq);
    Tensor k = project(x, blk.wk, blk.qk);
    Tensor v = project(x, blk.wv, blk.qv);
    std::vector<Tensor> heads;
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
        Tensor qh = slice_cols(q, hd * dh, dh);
        Tensor kh = slice_cols(k, hd * dh, dh);
        Tensor vh = slice_cols(v, hd * dh, dh);
        Tensor scores = scale(matmul_nt(qh, kh), 1.0f / std::sqrt(static_cast<float>(dh)));
        Tensor probs = softmax_rows(causal_mask(scores));
        heads.push_back(matmul(probs, vh));
    }
    return project(concat_cols(heads), blk.wo, blk.qo);
}

Model::ForwardResult Model::forward(const std::vector<int>& ids, const Tensor* image,
                                    const PanopticGrid* grid) const {
    const auto& tok = Tokenizer::instance();
    int image_pos = -1;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == tok.image_id()) {
            if (image_pos >= 0) throw ProtocolError("<image> may occur at most once");
            image_pos = static_cast<int>(i);
        }
    }
    if (image_pos >= 0 && (image == nullptr || grid == nullptr))
        throw ProtocolError("sequence contains <image> but no image/grid was provided");

    ForwardResult res;
    Tensor x;
    if (image_pos >= 0) {
        const int hw = cfg_.image_tokens();
        res.img_start = image_pos;
        Tensor enc = encode_image(*image);
        Tensor connected;
        if (crayon_on) {
            PanopticGrid small = downsample(*grid, cfg_.patch_h, cfg_.patch_w);
            connected = connect(build_prompt(small, codebooks_, crayon_flags), connector_);
        }
        std::vector<Tensor> parts;
        auto text_part = [&](size_t lo, size_t hi, int pos_base) {
            std::vector<int> seg(ids.begin() + static_cast<long>(lo), ids.begin() + static_cast<long>(hi));
            std::vector<int> positions(seg.size());
            for (size_t i = 0; i < seg.size(); ++i) positions[i] = pos_base + static_cast<int>(i);
            if (pos_base + static_cast<int>(seg.size()) > cfg_.max_seq)
                throw ShapeError("sequence exceeds max_seq");
            return add(embedding_rows(tok_emb_, seg), embedding_rows(pos_emb_, positions));
        };
        if (image_pos > 0) parts.push_back(text_part(0, static_cast<size_t>(image_pos), 0));
        parts.push_back(enc);
        if (static_cast<size_t>(image_pos) + 1 < ids.size())
            parts.push_back(text_part(static_cast<size_t>(image_pos) + 1, ids.size(), image_pos + hw));
        x = concat_rows(parts);
        for (size_t i = 0; i < ids.size(); ++i) {
            if (static_cast<int>(i) == image_pos)
                for (int r = 0; r < hw; ++r) res.expanded.push_back(-1);
            else
                res.expanded.push_back(ids[i]);
        }
        for (const auto& blk : blocks_) {
            Tensor in = crayon_on ? add_to_rows(x, connected, res.img_start) : x;
            x = add(in, attention(rms_norm(in, blk.ln1_gain), blk));
            Tensor mh = gelu(add_row_bias(matmul_nt(rms_norm(x, blk.ln2_gain), blk.mlp_w1), blk.mlp_b1));
            x = add(x, add_row_bias(matmul_nt(mh, blk.mlp_w2), blk.mlp_b2));
        }
    } else {
        res.expanded = ids;
        std::vector<int> positions(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
        if (static_cast<int>(ids.size()) > cfg_.max_seq) throw ShapeError("sequence exceeds max_seq");
        x = add(embedding_rows(tok_emb_, ids), embedding_rows(pos_emb_, positions));
        for (const auto& blk : blocks_) {
            x = add(x, attention(rms_norm(x, blk.ln1_gain), blk));
            Tensor mh = gelu(add_row_bias(matmul_nt(rms_norm(x, blk.ln2_gain), blk.mlp_w1), blk.mlp_b1));
            x = add(x, add_row_bias(matmul_nt(mh, blk.mlp_w2), blk.mlp_b2));
        }
    }
    res.logits = matmul_nt(rms_norm(x, final_gain_), unembed_);
    return res;
}

Tensor Model::record_loss(const EncodedRecord& rec, const Tensor* image,
                          const PanopticGrid* grid) const {
    ForwardResult fwd = forward(rec.ids, image, grid);
    const int L = static_cast<int>(fwd.expanded.size());
    // Position j predicts expanded position j+1; mask answer/stop targets.
    std::vector<int> targets(static_cast<size_t>(L) - 1, 0);
    std::vector<uint8_t> mask(static_cast<size_t>(L) - 1, 0);
    // Map un-expanded indices to expanded ones to translate the loss mask.
    const int hw = cfg_.image_tokens();
    int expanded_idx = 0;
    for (size_t i = 0; i < rec.ids.size(); ++i) {
        const bool is_image = rec.ids[i] == Tokenizer::instance().image_id() && fwd.img_start >= 0;
        if (is_image) {
            expanded_idx += hw;
            continue;
        }
        if (expanded_idx > 0 && rec.loss_mask[i]) {
            targets[static_cast<size_t>(expanded_idx) - 1] = rec.ids[i];
            mask[static_cast<size_t>(expanded_idx) - 1] = 1;
        }
        ++expanded_idx;
    }
    Tensor logits = slice_rows(fwd.logits, 0, L - 1);
    return masked_cross_entropy(logits, targets, mask);
}

void Model::quantize_backbone(int rank, float alpha, uint64_t seed, bool dual) {
    if (backbone_quantized_) throw StateError("backbone already quantized");
    Rng rng = derive_rng(seed, "qlora-init");
    for (auto& blk : blocks_) {
        blk.qq = QLoraLinear::from_dense(blk.wq, rank, alpha, rng, dual);
        blk.qk = QLoraLinear::from_dense(blk.wk, rank, alpha, rng, dual);
        blk.qv = QLoraLinear::from_dense(blk.wv, rank, alpha, rng, dual);
        blk.qo = QLoraLinear::from_dense(blk.wo, rank, alpha, rng, dual);
    }
    backbone_quantized_ = true;
    set_mode(CitMode::InferenceBoth);
}

void Model::set_mode(CitMode mode) {
    mode_ = mode;
    if (!backbone_quantized_) return;
    for (auto& blk : blocks_) {
        route(*blk.qq, mode);
        route(*blk.qk, mode);
        route(*blk.qv, mode);
        route(*blk.qo, mode);
    }
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    out.emplace_back("vision.patch_proj", vision_.patch_proj);
    out.emplace_back("vision.pos2d", vision_.pos2d);
    out.emplace_back("crayon.semantic", codebooks_.semantic);
    out.emplace_back("crayon.numbering", codebooks_.numbering);
    out.emplace_back("connector.w1", connector_.w1);
    out.emplace_back("connector.b1", connector_.b1);
    out.emplace_back("connector.w2", connector_.w2);
    out.emplace_back("connector.b2", connector_.b2);
    for (size_t l = 0; l < blocks_.size(); ++l) {
        auto& blk = blocks_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "ln1_gain", blk.ln1_gain);
        out.emplace_back(p + "ln2_gain", blk.ln2_gain);
        if (!backbone_quantized_) {
            out.emplace_back(p + "wq", blk.wq);
            out.emplace_back(p + "wk", blk.wk);
            out.emplace_back(p + "wv", blk.wv);
            out.emplace_back(p + "wo", blk.wo);
        } else {
            auto adapters = [&](const std::string& n, QLoraLinear& q) {
                out.emplace_back(p + n + ".lora_image.a", q.image.a);
                out.emplace_back(p + n + ".lora_image.b", q.image.b);
                out.emplace_back(p + n + ".lora_vl.a", q.vl.a);
                out.emplace_back(p + n + ".lora_vl.b", q.vl.b);
            };
            adapters("wq", *blk.qq);
            adapters("wk", *blk.qk);
            adapters("wv", *blk.qv);
            adapters("wo", *blk.qo);
        }
        out.emplace_back(p + "mlp_w1", blk.mlp_w1);
        out.emplace_back(p + "mlp_b1", blk.mlp_b1);
        out.emplace_back(p + "mlp_w2", blk.mlp_w2);
        out.emplace_back(p + "mlp_b2", blk.mlp_b2);
    }
    out.emplace_back("final_gain", final_gain_);
    out.emplace_back("unembed", unembed_);
    return out;
}

std::vector<std::pair<std::string, const QuantizedLinear*>> Model::quantized_sections() const {
    std::vector<std::pair<std::string, const QuantizedLinear*>> out;
    if (!backbone_quantized_) return out;
    for (size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", &blocks_[l].qq->base);
        out.emplace_back(p + "wk", &blocks_[l].qk->base);
        out.emplace_back(p + "wv", &blocks_[l].qv->base);
        out.emplace_back(p + "wo", &blocks_[l].qo->base);
    }
    return out;
}

void Model::set_all_trainable(bool trainable) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(trainable);
}

void Model::set_trainable(const std::vector<std::string>& names, bool trainable) {
    auto params = named_params();
    for (const auto& want : names) {
        bool found = false;
        for (auto& [name, t] : params) {
            if (name == want || name.rfind(want + ".", 0) == 0) {
                t.set_requires_grad(trainable);
                found = true;
            }
        }
        if (!found) throw ArgumentError("unknown parameter group: " + want);
    }
}

GenerationResult Model::generate(const std::vector<int>& prefix, const Tensor* image,
                                 const PanopticGrid* grid, int beam_n, int max_new) const {
    if (beam_n < 1) throw ArgumentError("beam width must be >= 1");
    const auto& tok = Tokenizer::instance();
    struct Beam {
        std::vector<int> ids;
        float log_prob = 0.0f;
        bool done = false;
    };
    std::vector<Beam> beams{{prefix, 0.0f, false}};
    for (int step = 0; step < max_new; ++step) {
        bool all_done = true;
        std::vector<Beam> candidates;
        for (const Beam& beam : beams) {
            if (beam.done) {
                candidates.push_back(beam);
                continue;
            }
            all_done = false;
            ForwardResult fwd = forward(beam.ids, image, grid);
            const int L = fwd.logits.dim(0), V = fwd.logits.dim(1);
            const float* row = fwd.logits.data().data() + static_cast<size_t>(L - 1) * V;
            // log-softmax of the last row
            float mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            float z = 0.0f;
            for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
            const float logz = std::log(z) + mx;
            // top beam_n tokens; ties resolved toward the lower id
            const int k = std::min(beam_n, V);
            std::vector<int> order(static_cast<size_t>(V));
            for (int j = 0; j < V; ++j) order[static_cast<size_t>(j)] = j;
            // The image placeholder is a protocol token, not generable text:
            // emitting it would make the continuation unencodable.
            const int img_id = tok.image_id();
            std::partial_sort(order.begin(), order.begin() + k, order.end(),
                              [&](int a, int b) {
                                  if ((a == img_id) != (b == img_id)) return b == img_id;
                                  if (row[a] != row[b]) return row[a] > row[b];
                                  return a < b;
                              });
            for (int c = 0; c < k; ++c) {
                Beam next = beam;
                const int id = order[static_cast<size_t>(c)];
                next.log_prob += row[id] - logz;
                if (id == tok.stop_id()) {
                    next.done = true;
                } else {
                    next.ids.push_back(id);
                }
                candidates.push_back(std::move(next));
            }
        }
        if (all_done) break;
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Beam& a, const Beam& b) { return a.log_prob > b.log_prob; });
        if (static_cast<int>(candidates.size()) > beam_n) candidates.resize(static_cast<size_t>(beam_n));
        beams = std::move(candidates);
    }
    const Beam* best = &beams[0];
    for (const Beam& b : beams)
        if (b.log_prob > best->log_prob) best = &b;
    GenerationResult res;
    res.ids.assign(best->ids.begin() + static_cast<long>(prefix.size()), best->ids.end());
    res.log_prob = best->log_prob;
    res.truncated = !best->done;
    return res;
}

}  // namespace crayonbox
