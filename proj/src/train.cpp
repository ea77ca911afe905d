#include "crayonbox/train.hpp"

#include <cmath>
#include <cstring>

#include "crayonbox/errors.hpp"

namespace crayonbox {

namespace {

uint64_t bytes_hash(uint64_t h, const void* data, size_t n) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct FrozenGroup {
    std::string name;
    Tensor param;
    uint64_t hash;
};

bool in_groups(const std::string& name, const std::vector<std::string>& groups) {
    for (const auto& g : groups)
        if (name == g || name.rfind(g + ".", 0) == 0) return true;
    return false;
}

bool is_adapter(const std::string& name) {
    return name.find(".lora_") != std::string::npos;
}

std::vector<FrozenGroup> collect_frozen(Model& model, TrainStage stage) {
    const auto allowed = stage_trainable_groups(stage);
    std::vector<FrozenGroup> frozen;
    for (auto& [name, t] : model.named_params()) {
        if (in_groups(name, allowed)) continue;
        if (stage == TrainStage::CIT && is_adapter(name)) continue;
        frozen.push_back({name, t, content_hash(t)});
    }
    return frozen;
}

void audit_frozen(const std::vector<FrozenGroup>& frozen, const Model& model,
                  uint64_t quant_hash, int step, TrainReport& report) {
    for (const auto& g : frozen)
        if (content_hash(g.param) != g.hash)
            throw TrainAbort("freeze audit failed at step " + std::to_string(step) +
                             ": group " + g.name + " changed");
    if (model.backbone_quantized() && quantized_content_hash(model) != quant_hash)
        throw TrainAbort("freeze audit failed at step " + std::to_string(step) +
                         ": quantized base changed");
    ++report.audits_passed;
}

void shuffle(std::vector<int>& order, Rng& rng) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(rng.uniform_int(i + 1))]);
}

Tensor batch_loss(const std::vector<int>& indices, const SynthDataset& ds,
                  const Model& model) {
    Tensor total;
    for (int idx : indices) {
        const auto& rec = ds.records[static_cast<size_t>(idx)];
        Tensor l = loss_of(rec, ds.scenes[static_cast<size_t>(rec.scene)], model);
        total = total.defined() ? add(total, l) : l;
    }
    return scale(total, 1.0f / static_cast<float>(indices.size()));
}

void check_finite_loss(float v, int step) {
    if (!std::isfinite(v))
        throw TrainAbort("non-finite loss " + std::to_string(v) + " at step " +
                         std::to_string(step));
}

void log_step(std::ostream* log, const StepLog& s) {
    if (log) *log << s.step << " " << s.lr << " " << s.loss << " " << kind_name(s.mode) << "\n";
}

}  // namespace

TrainConfig TrainConfig::cpt_defaults() {
    TrainConfig cfg;
    cfg.stage = TrainStage::CPT;
    cfg.lr_max = kCptLrMax;
    cfg.lr_min = kCptLrMin;
    return cfg;
}

TrainConfig TrainConfig::cit_defaults() {
    TrainConfig cfg;
    cfg.stage = TrainStage::CIT;
    cfg.lr_max = kCitLrMax;
    cfg.lr_min = kCitLrMin;
    return cfg;
}

Tensor loss_of(const InstructionRecord& rec, const Scene& scene, const Model& model) {
    EncodedRecord enc = encode_example(rec.question, rec.answer);
    return model.record_loss(enc, &scene.image, &scene.grid);
}

std::vector<std::string> stage_trainable_groups(TrainStage) {
    // CPT trains exactly the queries and the connector; CIT adds the
    // mode-selected adapter via route(), handled outside this list.
    return {"crayon", "connector"};
}

uint64_t content_hash(const Tensor& t) {
    uint64_t h = 0xcbf29ce484222325ULL;
    return bytes_hash(h, t.data().data(), t.numel() * sizeof(float));
}

uint64_t quantized_content_hash(const Model& model) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, q] : model.quantized_sections()) {
        h = bytes_hash(h, name.data(), name.size());
        h = bytes_hash(h, q->packed.data(), q->packed.size());
        h = bytes_hash(h, q->absmax_codes.data(), q->absmax_codes.size());
        h = bytes_hash(h, q->group_scale.data(), q->group_scale.size() * sizeof(float));
        h = bytes_hash(h, q->group_offset.data(), q->group_offset.size() * sizeof(float));
    }
    return h;
}

float warm_up_vision(Model& model, const SynthDataset& ds, int steps, float lr,
                     uint64_t seed) {
    if (ds.scenes.empty()) throw ArgumentError("warm_up_vision: no scenes");
    if (steps <= 0) throw ConfigError("warm_up_vision: steps must be positive");
    const ModelConfig& cfg = model.config();
    Rng rng = derive_rng(seed, "vision-warmup");
    Tensor head =
        Tensor::randn({ClassVocabulary::kNumClasses, cfg.d_model}, rng, 0.05f, true);
    model.set_all_trainable(false);
    model.vision().patch_proj.set_requires_grad(true);
    model.vision().pos2d.set_requires_grad(true);

    AdamW opt;
    opt.add_param("vision.patch_proj", model.vision().patch_proj);
    opt.add_param("vision.pos2d", model.vision().pos2d);
    opt.add_param("head", head);

    const std::vector<uint8_t> mask(static_cast<size_t>(cfg.image_tokens()), 1);
    float last = 0.0f;
    for (int step = 0; step < steps; ++step) {
        const Scene& scene =
            ds.scenes[static_cast<size_t>(rng.uniform_int(static_cast<int>(ds.scenes.size())))];
        PanopticGrid small = downsample(scene.grid, cfg.patch_h, cfg.patch_w);
        std::vector<int> targets(small.class_id.begin(), small.class_id.end());
        opt.zero_grad();
        {
            GradTape tape;
            Tensor logits = matmul_nt(model.encode_image(scene.image), head);
            Tensor loss = masked_cross_entropy(logits, targets, mask);
            last = loss.item();
            check_finite_loss(last, step);
            tape.backward(loss);
        }
        opt.step(lr);
    }
    model.vision().patch_proj.set_requires_grad(false);
    model.vision().pos2d.set_requires_grad(false);
    return last;
}

TrainReport run_cpt(Model& model, const SynthDataset& ds, const TrainConfig& cfg,
                    std::ostream* log) {
    if (ds.records.empty()) throw ArgumentError("run_cpt: empty dataset");
    if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(cfg.lr_max > cfg.lr_min) || !(cfg.lr_min > 0.0f))
        throw ConfigError("learning rates must satisfy lr_max > lr_min > 0");

    model.crayon_flags = {cfg.sem_query, cfg.num_query};
    model.crayon_on = cfg.sem_query || cfg.num_query;
    model.set_all_trainable(false);
    model.set_trainable(stage_trainable_groups(TrainStage::CPT), true);

    const int n = static_cast<int>(ds.records.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int total = steps_per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
    if (total <= 0) throw ConfigError("run_cpt: no steps to run");
    // denominator total-1 so the logged trace ends exactly at lr_min
    const LrSchedule sched{cfg.lr_max, cfg.lr_min, std::max(total - 1, 1)};

    AdamW opt(cfg.adamw);
    for (auto& [name, t] : model.named_params()) opt.add_param(name, t);
    auto frozen = collect_frozen(model, TrainStage::CPT);
    const uint64_t quant_hash =
        model.backbone_quantized() ? quantized_content_hash(model) : 0;

    TrainReport report;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng rng = derive_rng(cfg.seed, "cpt-order-" + std::to_string(epoch));
        shuffle(order, rng);
        for (int b = 0; b < steps_per_epoch && step < total; ++b, ++step) {
            std::vector<int> batch;
            for (int i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i)
                batch.push_back(order[static_cast<size_t>(i)]);
            const float lr = cosine_lr(step, sched);
            opt.zero_grad();
            float loss_val;
            {
                GradTape tape;
                Tensor loss = batch_loss(batch, ds, model);
                loss_val = loss.item();
                check_finite_loss(loss_val, step);
                tape.backward(loss);
            }
            opt.step(lr);
            StepLog entry{step, lr, loss_val, RecordKind::CrayonCPT};
            log_step(log, entry);
            report.steps.push_back(entry);
            if (cfg.freeze_audit_every > 0 && (step + 1) % cfg.freeze_audit_every == 0)
                audit_frozen(frozen, model, quant_hash, step, report);
        }
    }
    audit_frozen(frozen, model, quant_hash, step, report);
    report.initial_loss = report.steps.front().loss;
    report.final_loss = report.steps.back().loss;
    return report;
}

TrainReport run_cit(Model& model, const SynthDataset& ds, const TrainConfig& cfg,
                    std::ostream* log) {
    if (!model.backbone_quantized())
        throw StateError("run_cit: backbone must be quantized first");
    if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(cfg.lr_max > cfg.lr_min) || !(cfg.lr_min > 0.0f))
        throw ConfigError("learning rates must satisfy lr_max > lr_min > 0");

    std::vector<int> image_pool, vl_pool;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        if (ds.records[i].kind == RecordKind::VLCIT)
            vl_pool.push_back(static_cast<int>(i));
        else
            image_pool.push_back(static_cast<int>(i));
    }
    if (image_pool.empty() || vl_pool.empty())
        throw ConfigError("run_cit: needs both Image-CIT and VL-CIT records");

    model.crayon_flags = {cfg.sem_query, cfg.num_query};
    model.crayon_on = cfg.sem_query || cfg.num_query;
    model.set_all_trainable(false);
    model.set_trainable(stage_trainable_groups(TrainStage::CIT), true);

    const int n = static_cast<int>(ds.records.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    int total = steps_per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
    if (total <= 0) throw ConfigError("run_cit: no steps to run");
    // denominator total-1 so the logged trace ends exactly at lr_min
    const LrSchedule sched{cfg.lr_max, cfg.lr_min, std::max(total - 1, 1)};

    AdamW opt(cfg.adamw);
    for (auto& [name, t] : model.named_params()) opt.add_param(name, t);
    auto frozen = collect_frozen(model, TrainStage::CIT);
    const uint64_t quant_hash = quantized_content_hash(model);

    Rng mode_rng = derive_rng(cfg.seed, "cit-mode");
    Rng draw_rng = derive_rng(cfg.seed, "cit-draw");

    TrainReport report;
    for (int step = 0; step < total; ++step) {
        const bool image_step = mode_rng.bernoulli(cfg.p_image);
        const CitMode mode = image_step ? CitMode::ImageCIT : CitMode::VLCIT;
        model.set_mode(mode);
        const auto& pool = image_step ? image_pool : vl_pool;
        std::vector<int> batch;
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(pool[static_cast<size_t>(
                draw_rng.uniform_int(static_cast<int>(pool.size())))]);
        const float lr = cosine_lr(step, sched);
        opt.zero_grad();
        float loss_val;
        {
            GradTape tape;
            Tensor loss = batch_loss(batch, ds, model);
            loss_val = loss.item();
            check_finite_loss(loss_val, step);
            tape.backward(loss);
        }
        opt.step(lr);
        StepLog entry{step, lr, loss_val,
                      image_step ? RecordKind::ImageCIT : RecordKind::VLCIT};
        log_step(log, entry);
        report.steps.push_back(entry);
        if (cfg.freeze_audit_every > 0 && (step + 1) % cfg.freeze_audit_every == 0)
            audit_frozen(frozen, model, quant_hash, step, report);
    }
    audit_frozen(frozen, model, quant_hash, total, report);
    model.set_mode(CitMode::InferenceBoth);
    report.initial_loss = report.steps.front().loss;
    report.final_loss = report.steps.back().loss;
    return report;
}

}  // namespace crayonbox
