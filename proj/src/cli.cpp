#include "textregion/cli.hpp"

#include "textregion/bundle_io.hpp"
#include "textregion/metrics.hpp"
#include "textregion/png_io.hpp"
#include "textregion/predictor.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace textregion::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class Failure : public std::runtime_error {
  public:
    Failure(int code, const std::string& what) : std::runtime_error(what), code_(code) {}
    [[nodiscard]] int code() const { return code_; }

  private:
    int code_;
};

[[noreturn]] void config_error(const std::string& what) { throw Failure(kConfigError, what); }
[[noreturn]] void input_error(const std::string& what) { throw Failure(kInputError, what); }

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

void emit_error(std::ostream& err, int code, const std::string& message) {
    err << "textregion error code=" << code << ": " << one_line(message) << '\n';
}

std::string fmt_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c;
        if (c == '"') {
            out += '"';
        }
    }
    return out + "\"";
}

json read_json(const fs::path& path, const char* what) {
    if (!fs::is_regular_file(path)) {
        config_error(std::string(what) + " file " + quoted(path) + " does not exist");
    }
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        input_error(std::string(what) + " file " + quoted(path) + " is not valid JSON: " + e.what());
    }
}

Box box_from_json(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 4 || !std::all_of(j.begin(), j.end(), [](const json& v) {
            return v.is_number_integer();
        })) {
        input_error(where + ": boxes must be [x0, y0, x1, y1] integer arrays");
    }
    Box b{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
    if (b.x0 > b.x1 || b.y0 > b.y1) {
        input_error(where + ": box has x0 > x1 or y0 > y1");
    }
    return b;
}

std::vector<Box> boxes_for(const json& doc, const std::string& id, const std::string& what) {
    std::vector<Box> out;
    if (!doc.contains(id)) {
        return out;
    }
    const json& list = doc.at(id);
    if (!list.is_array()) {
        input_error(what + " entry for '" + id + "' is not a list");
    }
    for (const json& b : list) {
        out.push_back(box_from_json(b, what + " '" + id + "'"));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Job preparation and per-image context.

struct Job {
    RunConfig config;
    std::vector<std::string> ids;
    std::optional<LabelSet> shared_labels;
    json queries = json::object();
    json proposals = json::object();
    json gt_boxes = json::object();
};

struct ImageData {
    FeatureBundle bundle;
    LabelSet labels;
    RegionResult regions;
    std::vector<SoftMask> masks; // aligned with regions.tokens rows
};

fs::path bundle_path(const Job& job, const std::string& id) { return job.config.bundles / (id + ".txrb"); }
fs::path mask_path(const Job& job, const std::string& id) { return job.config.masks / (id + ".txrm"); }

LabelSet load_labels(const fs::path& path) {
    try {
        return LabelSet::from_bundle(load_bundle(path));
    } catch (const FormatError& e) {
        input_error("labels " + quoted(path) + ": " + e.what());
    } catch (const IoError& e) {
        config_error(e.what());
    }
}

struct JobNeeds {
    bool queries = false;
    bool gt_dir = false;
    bool gt_file = false;
    const char* gt_suffix = ".png"; // per-image ground-truth name pattern
};

Job prepare_job(const RunConfig& config, const JobNeeds& needs) {
    Job job;
    job.config = config;
    if (config.threads < 1) {
        config_error("thread count must be >= 1");
    }
    try {
        config.engine.validate();
    } catch (const std::invalid_argument& e) {
        config_error(e.what());
    }
    if (!fs::is_directory(config.bundles)) {
        config_error("bundle directory " + quoted(config.bundles) + " does not exist");
    }
    if (!fs::is_directory(config.masks)) {
        config_error("mask directory " + quoted(config.masks) + " does not exist");
    }
    for (const auto& entry : fs::directory_iterator(config.bundles)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txrb") {
            job.ids.push_back(entry.path().stem().string());
        }
    }
    std::sort(job.ids.begin(), job.ids.end());
    if (job.ids.empty()) {
        config_error("no .txrb bundles in " + quoted(config.bundles));
    }
    for (const auto& id : job.ids) {
        if (!fs::is_regular_file(mask_path(job, id))) {
            config_error("missing mask file " + quoted(mask_path(job, id)));
        }
    }
    if (config.labels) {
        if (!fs::is_regular_file(*config.labels)) {
            config_error("labels file " + quoted(*config.labels) + " does not exist");
        }
        job.shared_labels = load_labels(*config.labels);
    }
    if (needs.queries) {
        if (!config.queries) {
            config_error("--queries is required for this command");
        }
        job.queries = read_json(*config.queries, "queries");
        if (!job.queries.is_object()) {
            input_error("queries file must map image ids to lists of query names");
        }
        for (const auto& [id, list] : job.queries.items()) {
            if (!list.is_array() ||
                !std::all_of(list.begin(), list.end(), [](const json& q) { return q.is_string(); })) {
                input_error("queries for '" + id + "' must be a list of strings");
            }
        }
    }
    if (config.proposals) {
        job.proposals = read_json(*config.proposals, "proposals");
        if (!job.proposals.is_object()) {
            input_error("proposals file must map image ids to box lists");
        }
    }
    if (needs.gt_dir || needs.gt_file) {
        if (!config.gt) {
            config_error("--gt is required for evaluation");
        }
        if (needs.gt_file) {
            job.gt_boxes = read_json(*config.gt, "ground-truth");
            if (!job.gt_boxes.is_object()) {
                input_error("ground-truth box file must map image ids to box lists");
            }
        } else if (!fs::is_directory(*config.gt)) {
            config_error("ground-truth directory " + quoted(*config.gt) + " does not exist");
        }
    }
    std::error_code ec;
    fs::create_directories(config.out, ec);
    if (ec || !fs::is_directory(config.out)) {
        config_error("cannot create output directory " + quoted(config.out));
    }
    return job;
}

std::vector<std::string> queries_for(const Job& job, const std::string& id) {
    if (!job.queries.contains(id)) {
        return {};
    }
    return job.queries.at(id).get<std::vector<std::string>>();
}

std::span<const float> embedding_for(const LabelSet& labels, const std::string& name) {
    try {
        return labels.embeddings.row(labels.index_of(name));
    } catch (const std::out_of_range&) {
        config_error("query '" + name + "' has no embedding in the label set");
    }
}

ImageData load_image(const Job& job, const std::string& id) {
    ImageData data;
    MaskSet masks;
    try {
        data.bundle = load_bundle(bundle_path(job, id));
    } catch (const FormatError& e) {
        input_error("bundle " + quoted(bundle_path(job, id)) + ": " + e.what());
    }
    try {
        masks = load_mask_set(mask_path(job, id));
    } catch (const FormatError& e) {
        input_error("mask set " + quoted(mask_path(job, id)) + ": " + e.what());
    }
    if (job.shared_labels) {
        data.labels = *job.shared_labels;
    } else {
        try {
            data.labels = LabelSet::from_bundle(data.bundle);
        } catch (const FormatError& e) {
            input_error("bundle " + quoted(bundle_path(job, id)) + ": " + e.what() + " and no --labels given");
        }
    }
    const FeatureBundle& b = data.bundle;
    const int token_dim = b.head && b.head->enabled ? b.head->output_dim(b.embed_dim) : b.embed_dim;
    if (static_cast<std::size_t>(token_dim) != data.labels.dim()) {
        input_error("bundle " + quoted(bundle_path(job, id)) + " embed dim " + std::to_string(token_dim) +
                    " does not match label dim " + std::to_string(data.labels.dim()));
    }
    if (masks.image_size != b.image_size) {
        input_error("mask set " + quoted(mask_path(job, id)) + " is " + std::to_string(masks.image_size.rows) + "x" +
                    std::to_string(masks.image_size.cols) + " but the bundle image is " +
                    std::to_string(b.image_size.rows) + "x" + std::to_string(b.image_size.cols));
    }
    try {
        data.regions = compute_region_tokens(b, masks.masks, job.config.engine);
    } catch (const FormatError& e) {
        input_error("bundle " + quoted(bundle_path(job, id)) + ": " + e.what());
    }
    for (std::size_t index : data.regions.mask_index) {
        data.masks.push_back(std::move(masks.masks[index]));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Image-level worker pool. Results land in per-image slots; everything order-dependent
// (logs, merges, shared output files) happens afterwards in image order.

struct Outcome {
    int fatal = 0;
    bool failed = false;
    std::string message;
    std::vector<std::string> log;
};

std::vector<Outcome> for_each_image(const Job& job, const std::function<void(std::size_t, Outcome&)>& work) {
    std::vector<Outcome> outcomes(job.ids.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < job.ids.size(); k = next++) {
            try {
                work(k, outcomes[k]);
            } catch (const Failure& f) {
                outcomes[k].fatal = f.code();
                outcomes[k].message = f.what();
            } catch (const std::exception& e) {
                outcomes[k].failed = true;
                outcomes[k].message = "image '" + job.ids[k] + "': " + e.what();
            }
        }
    };
    const auto n = static_cast<std::size_t>(job.config.threads);
    const std::size_t count = std::min(n, job.ids.size());
    if (count <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < count; ++t) {
            pool.emplace_back(worker);
        }
    }
    return outcomes;
}

/// Emits logs in image order; returns the exit code for the run so far.
int settle(const std::vector<Outcome>& outcomes, std::ostream& err) {
    std::size_t failures = 0;
    for (const Outcome& o : outcomes) {
        for (const auto& line : o.log) {
            err << line << '\n';
        }
        if (o.failed) {
            ++failures;
            err << "warning: " << one_line(o.message) << '\n';
        }
    }
    for (const Outcome& o : outcomes) {
        if (o.fatal != 0) {
            emit_error(err, o.fatal, o.message);
            return o.fatal;
        }
    }
    if (failures > 0) {
        emit_error(err, kImageFailures,
                   std::to_string(failures) + " of " + std::to_string(outcomes.size()) + " images failed");
        return kImageFailures;
    }
    return kOk;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const Failure& f) {
        emit_error(err, f.code(), f.what());
        return f.code();
    } catch (const std::exception& e) {
        emit_error(err, kInputError, e.what());
        return kInputError;
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw std::runtime_error("failed writing " + quoted(path));
    }
}

// ---------------------------------------------------------------------------
// Segmentation.

struct SegmentResult {
    std::vector<int> label_map;
    RegionLogits logits;
};

SegmentResult segment_image(const Job& job, const ImageData& data) {
    SegmentResult out;
    const Grid size = data.bundle.image_size;
    if (data.masks.empty()) {
        out.label_map.assign(size.area(), job.config.ignore_index);
        return out;
    }
    out.logits = region_logits(data.regions.tokens, data.labels);
    out.label_map = dense_prediction(out.logits, data.masks, job.config.ignore_index).label_map;
    return out;
}

void write_segment_outputs(const Job& job, const std::string& id, const ImageData& data, const SegmentResult& seg) {
    const Grid size = data.bundle.image_size;
    const auto& palette = class_palette();
    std::vector<std::uint8_t> indices(seg.label_map.size());
    std::transform(seg.label_map.begin(), seg.label_map.end(), indices.begin(),
                   [](int v) { return static_cast<std::uint8_t>(v); });
    write_indexed_png(job.config.out / (id + "_labels.png"), size, indices, palette);

    std::vector<std::uint8_t> rgb(size.area() * 3, 0);
    for (int r = 0; r < size.rows; ++r) {
        for (int c = 0; c < size.cols; ++c) {
            const std::size_t p = static_cast<std::size_t>(r) * size.cols + c;
            const int label = seg.label_map[p];
            if (label == job.config.ignore_index) {
                continue;
            }
            const bool edge = (c + 1 < size.cols && seg.label_map[p + 1] != label) ||
                              (r + 1 < size.rows && seg.label_map[p + size.cols] != label);
            const Rgb color = edge ? Rgb{255, 255, 255} : palette[static_cast<std::size_t>(label)];
            std::copy(color.begin(), color.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * p));
        }
    }
    write_rgb_png(job.config.out / (id + "_overlay.png"), size, rgb);

    std::string csv = "region_id,label,logit\n";
    for (std::size_t r = 0; r < seg.logits.logits.rows(); ++r) {
        const auto row = seg.logits.logits.row(r);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        csv += std::to_string(data.regions.tokens.region_ids[r]) + "," + csv_field(data.labels.names[best]) + "," +
               fmt_value(row[best]) + "\n";
    }
    write_text(job.config.out / (id + "_regions.csv"), csv);
}

void check_png_encodable(const Job& job) {
    if (job.config.ignore_index < 0 || job.config.ignore_index > 255) {
        config_error("--ignore-index must lie in [0, 255] for PNG label maps");
    }
    if (job.shared_labels && job.shared_labels->size() > 255) {
        config_error("more than 255 classes cannot be written as 8-bit label maps");
    }
}

std::vector<int> read_gt_labels(const fs::path& path, Grid size) {
    if (!fs::is_regular_file(path)) {
        config_error("missing ground-truth file " + quoted(path));
    }
    LabelImage img;
    try {
        img = read_label_png(path);
    } catch (const PngError& e) {
        input_error(e.what());
    }
    if (img.size != size) {
        input_error("ground truth " + quoted(path) + " size differs from the image");
    }
    return {img.values.begin(), img.values.end()};
}

// ---------------------------------------------------------------------------
// Referring and grounding.

std::vector<Box> refer_image(const Job& job, const std::string& id, const ImageData& data) {
    const auto proposals = boxes_for(job.proposals, id, "proposals");
    std::vector<Box> out;
    for (const auto& q : queries_for(job, id)) {
        out.push_back(refer_select(data.regions.tokens, data.masks, embedding_for(data.labels, q), proposals));
    }
    return out;
}

std::vector<SoftMask> ground_image(const Job& job, const std::string& id, const ImageData& data) {
    std::vector<SoftMask> out;
    for (const auto& q : queries_for(job, id)) {
        const std::string contrast = contrast_query(job.config.contrast_template, q);
        out.push_back(ground_select(data.regions.tokens, data.masks, embedding_for(data.labels, q),
                                    embedding_for(data.labels, contrast), data.bundle.image_size));
    }
    return out;
}

fs::path ground_png(const fs::path& dir, const std::string& id, std::size_t k) {
    return dir / (id + "_" + std::to_string(k) + ".png");
}

json box_json(const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

} // namespace

// ---------------------------------------------------------------------------

int run_segment(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const Job job = prepare_job(config, {});
        check_png_encodable(job);
        std::vector<std::size_t> regions(job.ids.size());
        auto outcomes = for_each_image(job, [&](std::size_t k, Outcome& o) {
            const ImageData data = load_image(job, job.ids[k]);
            if (data.labels.size() > 255) {
                config_error("more than 255 classes cannot be written as 8-bit label maps");
            }
            const SegmentResult seg = segment_image(job, data);
            write_segment_outputs(job, job.ids[k], data, seg);
            regions[k] = data.masks.size();
            if (data.regions.dropped_regions > 0) {
                o.log.push_back("info: image '" + job.ids[k] + "': " + std::to_string(data.regions.dropped_regions) +
                                " regions had no pooled patches");
            }
        });
        const int code = settle(outcomes, err);
        if (code == kOk || code == kImageFailures) {
            std::size_t done = 0;
            for (const auto& o : outcomes) {
                done += (o.fatal == 0 && !o.failed) ? 1 : 0;
            }
            out << "segmented " << done << " of " << job.ids.size() << " images into " << quoted(config.out) << '\n';
        }
        return code;
    });
}

int run_refer(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const Job job = prepare_job(config, {.queries = true});
        std::vector<std::vector<Box>> boxes(job.ids.size());
        auto outcomes = for_each_image(job, [&](std::size_t k, Outcome&) {
            boxes[k] = refer_image(job, job.ids[k], load_image(job, job.ids[k]));
        });
        const int code = settle(outcomes, err);
        if (code != kOk && code != kImageFailures) {
            return code;
        }
        json doc = json::object();
        for (std::size_t k = 0; k < job.ids.size(); ++k) {
            if (outcomes[k].failed) {
                continue;
            }
            json list = json::array();
            for (const Box& b : boxes[k]) {
                list.push_back(box_json(b));
            }
            doc[job.ids[k]] = std::move(list);
        }
        write_text(config.out / "refer.json", doc.dump(2) + "\n");
        out << "wrote " << quoted(config.out / "refer.json") << '\n';
        return code;
    });
}

int run_ground(const RunConfig& config, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const Job job = prepare_job(config, {.queries = true});
        auto outcomes = for_each_image(job, [&](std::size_t k, Outcome&) {
            const auto masks = ground_image(job, job.ids[k], load_image(job, job.ids[k]));
            for (std::size_t q = 0; q < masks.size(); ++q) {
                const auto bin = binarize(masks[q]);
                std::vector<std::uint8_t> gray(bin.size());
                std::transform(bin.begin(), bin.end(), gray.begin(),
                               [](std::uint8_t b) { return static_cast<std::uint8_t>(b ? 255 : 0); });
                write_gray_png(ground_png(job.config.out, job.ids[k], q), masks[q].size, gray);
            }
        });
        const int code = settle(outcomes, err);
        if (code == kOk || code == kImageFailures) {
            out << "wrote grounding masks into " << quoted(config.out) << '\n';
        }
        return code;
    });
}

int run_eval(const RunConfig& config, Task task, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        JobNeeds needs;
        needs.queries = task != Task::segment;
        needs.gt_dir = task != Task::refer;
        needs.gt_file = task == Task::refer;
        const Job job = prepare_job(config, needs);

        std::vector<ConfusionMatrix> confusion(job.ids.size());
        std::vector<std::vector<std::pair<Box, Box>>> pairs(job.ids.size());
        std::vector<GroundingTally> tallies(job.ids.size());
        std::vector<std::size_t> classes(job.ids.size(), 0);
        std::vector<std::vector<std::string>> names(job.ids.size());

        auto outcomes = for_each_image(job, [&](std::size_t k, Outcome&) {
            const std::string& id = job.ids[k];
            const ImageData data = load_image(job, id);
            switch (task) {
            case Task::segment: {
                const auto gt = read_gt_labels(*job.config.gt / (id + ".png"), data.bundle.image_size);
                const auto seg = segment_image(job, data);
                confusion[k] = ConfusionMatrix(static_cast<int>(data.labels.size()));
                try {
                    accumulate_confusion(confusion[k], seg.label_map, gt, job.config.ignore_index);
                } catch (const std::out_of_range& e) {
                    input_error("ground truth for '" + id + "': " + e.what());
                }
                classes[k] = data.labels.size();
                names[k] = data.labels.names;
                break;
            }
            case Task::refer: {
                const auto predicted = refer_image(job, id, data);
                const auto truth = boxes_for(job.gt_boxes, id, "ground-truth");
                if (truth.size() != predicted.size()) {
                    input_error("ground truth for '" + id + "' has " + std::to_string(truth.size()) + " boxes for " +
                                std::to_string(predicted.size()) + " queries");
                }
                for (std::size_t q = 0; q < truth.size(); ++q) {
                    pairs[k].emplace_back(predicted[q], truth[q]);
                }
                break;
            }
            case Task::ground: {
                const auto predicted = ground_image(job, id, data);
                for (std::size_t q = 0; q < predicted.size(); ++q) {
                    const auto path = ground_png(*job.config.gt, id, q);
                    const auto raw = read_gt_labels(path, data.bundle.image_size);
                    SoftMask gt(0, data.bundle.image_size);
                    SoftMask ignore(0, data.bundle.image_size);
                    for (std::size_t p = 0; p < raw.size(); ++p) {
                        ignore.values[p] = raw[p] == 255 ? 1.0f : 0.0f;
                        gt.values[p] = (raw[p] != 0 && raw[p] != 255) ? 1.0f : 0.0f;
                    }
                    tallies[k].add(predicted[q], gt, &ignore);
                }
                break;
            }
            }
        });
        const int code = settle(outcomes, err);
        if (code != kOk && code != kImageFailures) {
            return code;
        }

        std::string csv = "metric,name,value\n";
        std::ostringstream summary;
        std::size_t scored_images = 0;
        for (const auto& o : outcomes) {
            scored_images += o.failed ? 0 : 1;
        }
        try {
            if (task == Task::segment) {
                std::optional<ConfusionMatrix> total;
                std::vector<std::string> class_names;
                for (std::size_t k = 0; k < job.ids.size(); ++k) {
                    if (outcomes[k].failed) {
                        continue;
                    }
                    if (!total) {
                        total = ConfusionMatrix(static_cast<int>(classes[k]));
                        class_names = names[k];
                    }
                    if (classes[k] != class_names.size()) {
                        input_error("images disagree on the number of classes");
                    }
                    total->merge(confusion[k]);
                }
                if (!total) {
                    throw EmptyEvaluationError("no image was scored");
                }
                const MiouResult m = miou(*total);
                summary << "class                          IoU\n";
                for (std::size_t c = 0; c < m.per_class.size(); ++c) {
                    if (!m.per_class[c]) {
                        continue;
                    }
                    csv += "iou," + csv_field(class_names[c]) + "," + fmt_value(*m.per_class[c]) + "\n";
                    char line[160];
                    std::snprintf(line, sizeof(line), "%-28s %8.2f\n", class_names[c].c_str(), 100.0 * *m.per_class[c]);
                    summary << line;
                }
                csv += "miou,all," + fmt_value(m.mean) + "\n";
                csv += "pixels,scored," + std::to_string(total->scored()) + "\n";
                csv += "pixels,ignored," + std::to_string(total->ignored()) + "\n";
                summary << "mIoU " << fmt_value(100.0 * m.mean) << " over " << scored_images << " images\n";
            } else if (task == Task::refer) {
                std::vector<std::pair<Box, Box>> all;
                for (std::size_t k = 0; k < job.ids.size(); ++k) {
                    all.insert(all.end(), pairs[k].begin(), pairs[k].end());
                }
                const double acc = rec_accuracy(all);
                csv += "accuracy,all," + fmt_value(acc) + "\n";
                csv += "pairs,all," + std::to_string(all.size()) + "\n";
                summary << "ReC accuracy " << fmt_value(100.0 * acc) << " over " << all.size() << " queries\n";
            } else {
                GroundingTally total;
                for (std::size_t k = 0; k < job.ids.size(); ++k) {
                    total.merge(tallies[k]);
                }
                csv += "giou,all," + fmt_value(total.giou()) + "\n";
                csv += "ciou,all," + fmt_value(total.ciou()) + "\n";
                csv += "items,all," + std::to_string(total.per_image_ious().size()) + "\n";
                summary << "gIoU " << fmt_value(100.0 * total.giou()) << "  cIoU " << fmt_value(100.0 * total.ciou())
                        << " over " << total.per_image_ious().size() << " queries\n";
            }
        } catch (const EmptyEvaluationError& e) {
            emit_error(err, kImageFailures, e.what());
            return static_cast<int>(kImageFailures);
        }
        write_text(config.out / "metrics.csv", csv);
        write_text(config.out / "summary.txt", summary.str());
        out << summary.str();
        return code;
    });
}

int run_inspect(const fs::path& file, std::ostream& out, std::ostream& err) {
    return guarded(err, [&]() -> int {
        if (!fs::is_regular_file(file)) {
            config_error("file " + quoted(file) + " does not exist");
        }
        const auto bytes = read_file(file);
        const bool is_mask = bytes.size() >= 4 && std::memcmp(bytes.data(), "TXRM", 4) == 0;
        try {
            if (is_mask) {
                const MaskSet set = load_mask_set(bytes);
                json header = mask_set_header(bytes);
                for (auto& r : header["regions"]) {
                    r["rle_runs"] = r["rle"].size();
                    r.erase("rle");
                }
                out << "mask set " << quoted(file) << ": " << set.masks.size() << " regions, "
                    << set.image_size.rows << "x" << set.image_size.cols << (set.soft ? " soft" : " hard") << '\n';
                out << header.dump(2) << '\n';
            } else {
                const FeatureBundle b = read_bundle(bytes);
                out << "bundle " << quoted(file) << ": model '" << b.model_id << "', " << b.tensors.size()
                    << " tensors, embed dim " << b.embed_dim << '\n';
                out << bundle_header(bytes).dump(2) << '\n';
            }
        } catch (const FormatError& e) {
            input_error(quoted(file) + ": " + e.what());
        }
        return kOk;
    });
}

// ---------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Region-token engine: open-vocabulary segmentation, referring and grounding over exported features",
                 "textregion"};
    app.require_subcommand(1);

    RunConfig config;
    config.contrast_template = std::string(kDefaultContrastQuery);
    std::string labels;
    std::string queries;
    std::string proposals;
    std::string gt;
    std::optional<double> fusion_weight;
    std::string similarity = "block_input";
    std::string empty_policy = "fallback";
    std::optional<int> threads;
    std::string inspect_file;

    auto add_common = [&](CLI::App* sub, bool needs_queries) {
        sub->add_option("--bundles", config.bundles, "Directory of <id>.txrb feature bundles")->required();
        sub->add_option("--masks", config.masks, "Directory of <id>.txrm mask sets")->required();
        sub->add_option("--labels", labels, "Label/query embedding bundle (default: each bundle's own labels)");
        sub->add_option("--out", config.out, "Output directory")->required();
        sub->add_option("--tau", config.engine.tau, "Global-patch threshold")->capture_default_str();
        sub->add_option("--fusion-weight", fusion_weight, "Weight of the upsampled full view (default: from bundle)");
        sub->add_option("--membership-threshold", config.engine.membership_threshold,
                        "Patch weight above which a patch belongs to a region")
            ->capture_default_str();
        sub->add_option("--similarity-source", similarity, "Features for local similarity")
            ->check(CLI::IsMember({"block_input", "value"}))
            ->capture_default_str();
        sub->add_option("--empty-region", empty_policy, "Policy when filtering empties a region")
            ->check(CLI::IsMember({"fallback", "drop"}))
            ->capture_default_str();
        sub->add_option("--threads", threads, "Worker threads (default: $TEXTREGION_THREADS or 1)");
        if (needs_queries) {
            sub->add_option("--queries", queries, "JSON map of image id to query names");
        }
    };

    auto* segment = app.add_subcommand("segment", "Dense open-vocabulary segmentation");
    add_common(segment, false);
    segment->add_option("--ignore-index", config.ignore_index, "Label for uncovered pixels")->capture_default_str();

    auto* refer = app.add_subcommand("refer", "Referring-expression box selection");
    add_common(refer, true);
    refer->add_option("--proposals", proposals, "JSON map of image id to [x0, y0, x1, y1] boxes");

    auto* ground = app.add_subcommand("ground", "Multi-object grounding against a contrastive query");
    add_common(ground, true);
    ground->add_option("--contrast-template", config.contrast_template, "Contrastive query; {query} is substituted")
        ->capture_default_str();

    auto* eval_seg = app.add_subcommand("eval-seg", "Segment and score mIoU against label PNGs");
    add_common(eval_seg, false);
    eval_seg->add_option("--ignore-index", config.ignore_index, "Ignored label")->capture_default_str();
    eval_seg->add_option("--gt", gt, "Directory of <id>.png ground-truth label maps")->required();

    auto* eval_rec = app.add_subcommand("eval-rec", "Refer and score box accuracy at IoU >= 0.5");
    add_common(eval_rec, true);
    eval_rec->add_option("--proposals", proposals, "JSON map of image id to [x0, y0, x1, y1] boxes");
    eval_rec->add_option("--gt", gt, "JSON map of image id to ground-truth boxes, one per query")->required();

    auto* eval_ground = app.add_subcommand("eval-ground", "Ground and score gIoU / cIoU");
    add_common(eval_ground, true);
    eval_ground->add_option("--contrast-template", config.contrast_template, "Contrastive query; {query} is substituted")
        ->capture_default_str();
    eval_ground->add_option("--gt", gt, "Directory of <id>_<k>.png masks (0 background, 255 ignore)")->required();

    auto* inspect = app.add_subcommand("inspect", "Dump bundle or mask-set metadata");
    inspect->add_option("file", inspect_file, "A .txrb or .txrm file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        emit_error(err, kConfigError, e.what());
        return kConfigError;
    }

    if (inspect->parsed()) {
        return run_inspect(inspect_file, out, err);
    }

    if (!labels.empty()) {
        config.labels = labels;
    }
    if (!queries.empty()) {
        config.queries = queries;
    }
    if (!proposals.empty()) {
        config.proposals = proposals;
    }
    if (!gt.empty()) {
        config.gt = gt;
    }
    config.engine.fusion_weight = fusion_weight;
    config.engine.similarity_source = similarity == "value" ? SimilaritySource::value : SimilaritySource::block_input;
    config.engine.empty_region_policy =
        empty_policy == "drop" ? EmptyRegionPolicy::drop : EmptyRegionPolicy::fallback_unfiltered;
    if (threads) {
        config.threads = *threads;
    } else if (const char* env = std::getenv("TEXTREGION_THREADS"); env != nullptr && *env != '\0') {
        try {
            config.threads = std::stoi(env);
        } catch (const std::exception&) {
            emit_error(err, kConfigError, std::string("TEXTREGION_THREADS='") + env + "' is not an integer");
            return kConfigError;
        }
    }

    if (segment->parsed()) {
        return run_segment(config, out, err);
    }
    if (refer->parsed()) {
        return run_refer(config, out, err);
    }
    if (ground->parsed()) {
        return run_ground(config, out, err);
    }
    if (eval_seg->parsed()) {
        return run_eval(config, Task::segment, out, err);
    }
    if (eval_rec->parsed()) {
        return run_eval(config, Task::refer, out, err);
    }
    return run_eval(config, Task::ground, out, err);
}

} // namespace textregion::cli
