#include "crayonbox/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "crayonbox/errors.hpp"
#include "crayonbox/vocab.hpp"

namespace crayonbox {

namespace {

std::string lower_trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    std::string out = s.substr(a, b - a);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string first_word(const std::string& s) {
    const std::string t = lower_trim(s);
    size_t end = 0;
    while (end < t.size() && !std::isspace(static_cast<unsigned char>(t[end])) &&
           t[end] != '.' && t[end] != ',' && t[end] != '!')
        ++end;
    return t.substr(0, end);
}

// Thing classes present anywhere in the grid.
std::set<int> present_things(const PanopticGrid& grid) {
    std::set<int> out;
    const auto& vocab = ClassVocabulary::instance();
    for (uint8_t c : grid.class_id)
        if (vocab.is_thing(c)) out.insert(c);
    return out;
}

std::string existence_question(int cid) {
    return "Is there any " + ClassVocabulary::instance().name(cid) + " in this image?";
}

std::string count_question(int cid) {
    return "How many " + ClassVocabulary::instance().name(cid) + " are in this image?";
}

std::string box_question(const ObjectEntry& e) {
    return "Which object is in the specified bounding box [" + format_coord(e.x_min) + ", " +
           format_coord(e.y_min) + ", " + format_coord(e.x_max) + ", " +
           format_coord(e.y_max) + "]?";
}

// Extract the class name from one of the three fixed question templates.
int parse_question_class(const std::string& q) {
    const auto& vocab = ClassVocabulary::instance();
    auto between = [&](const std::string& pre, const std::string& post) -> int {
        if (q.rfind(pre, 0) != 0) return -1;
        const size_t end = q.find(post);
        if (end == std::string::npos) return -1;
        return vocab.id(q.substr(pre.size(), end - pre.size()));
    };
    int cid = between("Is there any ", " in this image?");
    if (cid < 0) cid = between("How many ", " are in this image?");
    return cid;
}

bool parse_question_box(const std::string& q, float box[4]) {
    const std::string pre = "Which object is in the specified bounding box [";
    if (q.rfind(pre, 0) != 0) return false;
    size_t pos = pre.size();
    for (int i = 0; i < 4; ++i) {
        const size_t end = q.find_first_of(",]", pos);
        if (end == std::string::npos) return false;
        box[i] = std::stof(q.substr(pos, end - pos));
        pos = end + 2;
    }
    return true;
}

void append_line(std::string& out, const char* fmt, ...) __attribute__((format(printf, 2, 3)));
void append_line(std::string& out, const char* fmt, ...) {
    char buf[512];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    out += buf;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path);
    out << content;
    if (!out) throw ArtifactError("write failed for " + path);
}

}  // namespace

Answerer model_answerer(const Model& model, int beam_n) {
    return [&model, beam_n](const Scene& scene, const std::string& question) {
        std::vector<int> prefix = encode_prefix(question);
        GenerationResult g = model.generate(prefix, &scene.image, &scene.grid, beam_n, 16);
        return Tokenizer::instance().decode(g.ids);
    };
}

Answerer oracle_answerer() {
    return [](const Scene& scene, const std::string& question) -> std::string {
        float box[4];
        if (parse_question_box(question, box)) {
            for (const auto& e : extract_objects(scene.grid)) {
                if (format_coord(e.x_min) == format_coord(box[0]) &&
                    format_coord(e.y_min) == format_coord(box[1]) &&
                    format_coord(e.x_max) == format_coord(box[2]) &&
                    format_coord(e.y_max) == format_coord(box[3]))
                    return ClassVocabulary::instance().name(e.class_id);
            }
            return "unk";
        }
        const int cid = parse_question_class(question);
        if (cid < 0) throw ArgumentError("oracle cannot parse question: " + question);
        if (question.rfind("How many ", 0) == 0)
            return std::to_string(class_instance_count(scene.grid, cid));
        for (uint8_t c : scene.grid.class_id)
            if (c == cid) return "Yes";
        return "No";
    };
}

Answerer always_yes_answerer() {
    return [](const Scene&, const std::string&) { return std::string("Yes"); };
}

std::vector<ProbeResult> probe_c2b(const Answerer& answer, const SynthDataset& ds,
                                   const std::vector<int>& classes, uint64_t seed) {
    const auto& vocab = ClassVocabulary::instance();
    std::vector<ProbeResult> out;
    for (size_t si = 0; si < ds.scenes.size(); ++si) {
        const Scene& scene = ds.scenes[si];
        std::set<int> present = present_things(scene.grid);
        std::vector<int> positives, negatives;
        for (int cid : vocab.thing_ids()) {
            if (!classes.empty() &&
                std::find(classes.begin(), classes.end(), cid) == classes.end())
                continue;
            (present.count(cid) ? positives : negatives).push_back(cid);
        }
        // equal number of absent-class negatives, sampled without replacement
        Rng rng = derive_rng(seed, "c2b-neg-" + std::to_string(si));
        for (int i = static_cast<int>(negatives.size()) - 1; i > 0; --i)
            std::swap(negatives[static_cast<size_t>(i)],
                      negatives[static_cast<size_t>(rng.uniform_int(i + 1))]);
        if (negatives.size() > positives.size()) negatives.resize(positives.size());

        for (int pass = 0; pass < 2; ++pass) {
            for (int cid : (pass == 0 ? positives : negatives)) {
                ProbeResult p;
                p.kind = ProbeKind::C2B;
                p.scene = static_cast<int>(si);
                p.class_id = cid;
                p.positive = pass == 0;
                p.question = existence_question(cid);
                p.answer = answer(scene, p.question);
                const std::string w = first_word(p.answer);
                if (w == "yes" || w == "no") {
                    p.prediction = w;
                    p.correct = (w == "yes") == p.positive;
                } else {
                    p.unparseable = true;
                }
                out.push_back(std::move(p));
            }
        }
    }
    return out;
}

std::vector<ProbeResult> probe_b2c(const Answerer& answer, const SynthDataset& ds) {
    const auto& vocab = ClassVocabulary::instance();
    std::vector<ProbeResult> out;
    for (size_t si = 0; si < ds.scenes.size(); ++si) {
        const Scene& scene = ds.scenes[si];
        for (const auto& e : extract_objects(scene.grid)) {
            if (!vocab.is_thing(e.class_id)) continue;
            ProbeResult p;
            p.kind = ProbeKind::B2C;
            p.scene = static_cast<int>(si);
            p.class_id = e.class_id;
            p.question = box_question(e);
            p.answer = answer(scene, p.question);
            const std::string norm = lower_trim(p.answer);
            if (vocab.id(norm) >= 0) {
                p.prediction = norm;
                p.correct = norm == vocab.name(e.class_id);
            } else {
                p.unparseable = true;
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<ProbeResult> probe_count(const Answerer& answer, const SynthDataset& ds) {
    std::vector<ProbeResult> out;
    for (size_t si = 0; si < ds.scenes.size(); ++si) {
        const Scene& scene = ds.scenes[si];
        for (int cid : present_things(scene.grid)) {
            ProbeResult p;
            p.kind = ProbeKind::Count;
            p.scene = static_cast<int>(si);
            p.class_id = cid;
            p.positive = true;
            p.question = count_question(cid);
            p.answer = answer(scene, p.question);
            const std::string w = first_word(p.answer);
            if (!w.empty() && w.find_first_not_of("0123456789") == std::string::npos) {
                p.prediction = w;
                p.correct = std::stoi(w) == class_instance_count(scene.grid, cid);
            } else {
                p.unparseable = true;
            }
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::map<int, double> per_class_accuracy(const std::vector<ProbeResult>& results) {
    std::map<int, std::pair<int, int>> tally;  // class -> (correct, total)
    for (const auto& p : results) {
        auto& t = tally[p.class_id];
        t.first += p.correct ? 1 : 0;
        t.second += 1;
    }
    std::map<int, double> out;
    for (const auto& [cid, t] : tally)
        out[cid] = static_cast<double>(t.first) / static_cast<double>(t.second);
    return out;
}

CategoryStats category_stats(const std::vector<ProbeResult>& c2b,
                             const std::vector<ProbeResult>& b2c) {
    const auto& vocab = ClassVocabulary::instance();
    auto c2b_acc = per_class_accuracy(c2b);
    auto b2c_acc = per_class_accuracy(b2c);

    CategoryStats stats;
    for (int cid : vocab.thing_ids()) {
        const bool has_c2b = c2b_acc.count(cid) > 0;
        const bool has_b2c = b2c_acc.count(cid) > 0;
        if (!has_c2b && !has_b2c) {
            stats.excluded.push_back(cid);
            continue;
        }
        ClassAccuracy row;
        row.class_id = cid;
        double sum = 0.0;
        int n = 0;
        if (has_c2b) {
            row.c2b = c2b_acc[cid];
            sum += row.c2b;
            ++n;
        }
        if (has_b2c) {
            row.b2c = b2c_acc[cid];
            sum += row.b2c;
            ++n;
        }
        row.mean = sum / n;
        stats.rows.push_back(row);
    }
    if (stats.rows.empty()) throw ArgumentError("category_stats: no probed classes");

    std::vector<double> means;
    for (const auto& r : stats.rows) means.push_back(r.mean);
    std::sort(means.begin(), means.end());
    stats.k = std::min(20, static_cast<int>(means.size()) / 2);
    double total = 0.0;
    for (double m : means) total += m;
    stats.overall = total / static_cast<double>(means.size());
    if (stats.k > 0) {
        double top = 0.0, bottom = 0.0;
        for (int i = 0; i < stats.k; ++i) {
            bottom += means[static_cast<size_t>(i)];
            top += means[means.size() - 1 - static_cast<size_t>(i)];
        }
        stats.top_mean = top / stats.k;
        stats.bottom_mean = bottom / stats.k;
    } else {
        stats.top_mean = stats.bottom_mean = stats.overall;
    }
    return stats;
}

std::pair<double, double> RegressionResult::band(double x) const {
    const double half =
        t_crit * resid_std * std::sqrt(1.0 / n + (x - x_mean) * (x - x_mean) / sxx);
    const double center = fit(x);
    return {center - half, center + half};
}

RegressionResult regress_ci(const std::vector<double>& x, const std::vector<double>& y,
                            double confidence) {
    if (x.size() != y.size()) throw ArgumentError("regress_ci: size mismatch");
    const int n = static_cast<int>(x.size());
    if (n < 3) throw ArgumentError("regress_ci: need at least 3 points");
    double xm = 0.0, ym = 0.0;
    for (int i = 0; i < n; ++i) {
        xm += x[static_cast<size_t>(i)];
        ym += y[static_cast<size_t>(i)];
    }
    xm /= n;
    ym /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dx = x[static_cast<size_t>(i)] - xm;
        const double dy = y[static_cast<size_t>(i)] - ym;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (sxx <= 0.0) throw ArgumentError("regress_ci: x values are all equal");

    RegressionResult reg;
    reg.n = n;
    reg.x_mean = xm;
    reg.sxx = sxx;
    reg.slope = sxy / sxx;
    reg.intercept = ym - reg.slope * xm;
    reg.r = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
    double sse = 0.0;
    for (int i = 0; i < n; ++i) {
        const double e = y[static_cast<size_t>(i)] - reg.fit(x[static_cast<size_t>(i)]);
        sse += e * e;
    }
    reg.resid_std = std::sqrt(std::max(0.0, sse) / (n - 2));
    boost::math::students_t dist(n - 2);
    reg.t_crit = boost::math::quantile(dist, 0.5 + confidence / 2.0);
    return reg;
}

void emit_report(const CategoryStats& stats, const std::map<int, double>& task_acc,
                 const RegressionResult& reg, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    const auto& vocab = ClassVocabulary::instance();

    std::string csv = "class,c2b_acc,b2c_acc,mean_acc,task_acc\n";
    for (const auto& row : stats.rows) {
        auto it = task_acc.find(row.class_id);
        append_line(csv, "%s,%.6f,%.6f,%.6f,%.6f\n", vocab.name(row.class_id).c_str(),
                    row.c2b, row.b2c, row.mean,
                    it == task_acc.end() ? -1.0 : it->second);
    }
    write_file(dir + "/report.csv", csv);

    std::string summary;
    append_line(summary, "slope=%.8f\n", reg.slope);
    append_line(summary, "intercept=%.8f\n", reg.intercept);
    append_line(summary, "r=%.8f\n", reg.r);
    append_line(summary, "n=%d\n", reg.n);
    append_line(summary, "overall=%.6f\n", stats.overall);
    append_line(summary, "top%d=%.6f\n", stats.k, stats.top_mean);
    append_line(summary, "bottom%d=%.6f\n", stats.k, stats.bottom_mean);
    write_file(dir + "/summary.txt", summary);

    // Scatter + fit + band in data coordinates; y is drawn as 1-y so larger
    // accuracies sit higher while staying exactly recoverable.
    std::vector<std::pair<double, double>> points;
    for (const auto& row : stats.rows) {
        auto it = task_acc.find(row.class_id);
        if (it != task_acc.end()) points.emplace_back(row.mean, it->second);
    }
    std::sort(points.begin(), points.end());
    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"-0.1 -0.1 1.3 1.3\">\n";
    std::string band_pts;
    for (const auto& [px, _] : points) {
        auto [lo, hi] = reg.band(px);
        append_line(band_pts, "%.6f,%.6f ", px, 1.0 - hi);
        (void)lo;
    }
    for (size_t i = points.size(); i-- > 0;) {
        auto [lo, hi] = reg.band(points[i].first);
        append_line(band_pts, "%.6f,%.6f ", points[i].first, 1.0 - lo);
        (void)hi;
    }
    if (!band_pts.empty()) band_pts.pop_back();
    svg += "<polygon id=\"band\" fill=\"#9ecae1\" opacity=\"0.5\" points=\"" + band_pts +
           "\"/>\n";
    if (!points.empty()) {
        const double x0 = points.front().first, x1 = points.back().first;
        append_line(svg,
                    "<line id=\"fit\" stroke=\"#3182bd\" stroke-width=\"0.004\" "
                    "x1=\"%.6f\" y1=\"%.6f\" x2=\"%.6f\" y2=\"%.6f\"/>\n",
                    x0, 1.0 - reg.fit(x0), x1, 1.0 - reg.fit(x1));
    }
    for (const auto& [px, py] : points)
        append_line(svg,
                    "<circle class=\"pt\" fill=\"#de2d26\" r=\"0.008\" cx=\"%.6f\" "
                    "cy=\"%.6f\"/>\n",
                    px, 1.0 - py);
    svg += "</svg>\n";
    write_file(dir + "/plot.svg", svg);
}

}  // namespace crayonbox
