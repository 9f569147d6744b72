// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include "fixtures.hpp"
#include "oracles.hpp"

#include "textregion/cli.hpp"
#include "textregion/metrics.hpp"
#include "textregion/predictor.hpp"
#include "textregion/region_engine.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

using namespace textregion;
using namespace textregion::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

bool within_rel(double got, double want, double rel) {
    return std::abs(got - want) <= rel * std::max(1.0, std::abs(want));
}

int run_cli(std::vector<std::string> args, std::string* err_out = nullptr) {
    args.insert(args.begin(), "textregion");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (err_out != nullptr) {
        *err_out = err.str();
    }
    return code;
}

std::vector<std::string> dir_args(const fs::path& dir, const std::string& out) {
    return {"--bundles", (dir / "bundles").string(), "--masks", (dir / "masks").string(), "--out",
            (dir / out).string(), "--threads", "1"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

// mIoU of one image's segment output against its ground truth, via the independent set oracle.
double oracle_miou(const std::vector<int>& pred, const std::vector<int>& gt, int classes) {
    const auto ious = oracle::set_iou(pred, gt, classes, 255);
    double sum = 0.0;
    int present = 0;
    for (double v : ious) {
        if (v >= 0.0) {
            sum += v;
            ++present;
        }
    }
    return present == 0 ? -1.0 : sum / present;
}

Verdict pooling_oracle() {
    Rng rng(1001);
    std::uniform_int_distribution<int> side(1, 5);
    std::uniform_int_distribution<int> dim(1, 8);
    std::uniform_int_distribution<int> count(1, 4);
    const auto t0 = Clock::now();
    double worst = 0.0;
    bool ok = true;
    for (int trial = 0; trial < 200; ++trial) {
        const Grid grid{side(rng), side(rng)};
        const auto d = static_cast<std::size_t>(dim(rng));
        const PatchFeatures values{random_matrix(rng, grid.area(), d), grid};
        std::vector<PatchMask> masks;
        const int regions = count(rng);
        for (int r = 0; r < regions; ++r) {
            masks.push_back(random_patch_mask(rng, grid, r));
        }
        const auto pooled = pool_regions(values, masks);
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < grid.area(); ++i) {
            rows.emplace_back(values.features.row(i).begin(), values.features.row(i).end());
        }
        for (std::size_t r = 0; r < masks.size(); ++r) {
            const std::vector<double> m(masks[r].values.begin(), masks[r].values.end());
            const auto want = oracle::weighted_sum(m, rows);
            for (std::size_t k = 0; k < d; ++k) {
                const double err = std::abs(pooled.tokens(r, k) - want[k]) / std::max(1.0, std::abs(want[k]));
                worst = std::max(worst, err);
                ok = ok && within_rel(pooled.tokens(r, k), want[k], 1e-6);
            }
        }
    }
    const double elapsed = seconds_since(t0);
    return {ok && elapsed < 1.0, "200 instances, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.3f", elapsed) + " s"};
}

Verdict argmax_invariance() {
    Rng rng(1002);
    int checks = 0;
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 4 + static_cast<std::size_t>(trial % 13);
        const std::size_t classes = 2 + static_cast<std::size_t>(trial % 5);
        LabelSet labels;
        labels.embeddings = Matrix(classes, d);
        for (std::size_t c = 0; c < classes; ++c) {
            labels.names.push_back(std::to_string(c));
            const auto u = random_unit(rng, d);
            std::copy(u.begin(), u.end(), labels.embeddings.row(c).begin());
        }
        const Grid grid{4, 4};
        const PatchFeatures values{random_matrix(rng, grid.area(), d), grid};
        std::vector<PatchMask> masks;
        for (int r = 0; r < 3; ++r) {
            PatchMask m = random_patch_mask(rng, grid, r);
            m.values[static_cast<std::size_t>(r)] = 1.0f;
            masks.push_back(m);
        }
        auto labels_for = [&](float alpha) {
            std::vector<PatchMask> scaled = masks;
            for (auto& m : scaled) {
                for (float& v : m.values) {
                    v *= alpha;
                }
            }
            const auto logits = region_logits(pool_regions(values, scaled), labels);
            std::vector<std::size_t> best;
            for (std::size_t r = 0; r < logits.logits.rows(); ++r) {
                const auto row = logits.logits.row(r);
                best.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
            }
            return best;
        };
        const auto base = labels_for(1.0f);
        for (float alpha : {0.1f, 1.0f, 10.0f}) {
            ++checks;
            mismatches += labels_for(alpha) == base ? 0 : 1;
        }
    }
    return {mismatches == 0, std::to_string(checks) + " set/alpha pairs, " + std::to_string(mismatches) + " mismatches"};
}

Verdict bilinear_oracle() {
    Rng rng(1003);
    std::uniform_int_distribution<int> side(1, 16);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Grid size{side(rng), side(rng)};
        std::uniform_int_distribution<int> gr(1, size.rows);
        std::uniform_int_distribution<int> gc(1, size.cols);
        const Grid grid{gr(rng), gc(rng)};
        const SoftMask m = random_soft_mask(rng, size);
        const std::vector<double> src(m.values.begin(), m.values.end());
        const auto want = oracle::bilinear_resize(src, size.rows, size.cols, grid.rows, grid.cols);
        const auto got = downsample_mask(m, grid).values;
        for (std::size_t k = 0; k < want.size(); ++k) {
            worst = std::max(worst, std::abs(got[k] - want[k]));
        }
    }
    return {worst <= 1e-6, "100 masks up to 16x16, max abs err " + fmt("%.2e", worst)};
}

Verdict partition_fixture() {
    const auto dir = scratch_dir("acceptance_partition");
    const Fixture f = make_partition_fixture({});
    write_fixture(f, dir, "img");
    std::string err;
    const int code = run_cli(cat({"segment"}, dir_args(dir, "out")), &err);
    if (code != 0) {
        return {false, "segment exited " + std::to_string(code) + ": " + err};
    }
    const auto pred = read_label_map(dir / "out" / "img_labels.png");
    const double m = oracle_miou(pred, f.gt, 4);
    std::size_t uncovered = 0;
    bool ignore_ok = true;
    for (std::size_t p = 0; p < pred.size(); ++p) {
        if (f.gt[p] == 255) {
            ++uncovered;
            ignore_ok = ignore_ok && pred[p] == 255;
        }
    }
    return {m == 1.0 && ignore_ok && uncovered > 0,
            "mIoU " + fmt("%.6f", m) + ", " + std::to_string(uncovered) + " uncovered pixels " +
                (ignore_ok ? "all 255" : "NOT all 255")};
}

Verdict poisoning_fixture() {
    const auto dir = scratch_dir("acceptance_poison");
    const Fixture f = make_poison_fixture();
    write_fixture(f, dir, "img");
    auto miou_at = [&](const std::string& tau) {
        std::string err;
        const int code = run_cli(cat({"segment", "--tau", tau}, dir_args(dir, "tau" + tau)), &err);
        if (code != 0) {
            return -2.0;
        }
        return oracle_miou(read_label_map(dir / ("tau" + tau) / "img_labels.png"), f.gt, 4);
    };
    const double filtered = miou_at("0.07");
    const double unfiltered = miou_at("-1");
    return {filtered == 1.0 && unfiltered < 1.0,
            "mIoU at tau 0.07 = " + fmt("%.6f", filtered) + ", at tau -1 = " + fmt("%.6f", unfiltered)};
}

Verdict metric_oracles() {
    Rng rng(1004);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int classes = 1 + trial % 4;
        std::uniform_int_distribution<int> label(0, classes);
        std::vector<int> pred(64);
        std::vector<int> gt(64);
        for (std::size_t p = 0; p < 64; ++p) {
            const int a = label(rng);
            const int b = label(rng);
            pred[p] = a == classes ? 255 : a;
            gt[p] = b == classes ? 255 : b;
        }
        ConfusionMatrix cm(classes);
        accumulate_confusion(cm, pred, gt, 255);
        const double want = oracle_miou(pred, gt, classes);
        if (want < 0.0) {
            continue;
        }
        mismatches += miou(cm).mean == want ? 0 : 1;
    }

    int single_mismatch = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const GroundingItem item{random_soft_mask(rng, {6, 6}), random_soft_mask(rng, {6, 6}), std::nullopt};
        const auto s = grounding_scores(std::span(&item, 1));
        single_mismatch += s.giou == s.ciou ? 0 : 1;
    }

    SoftMask small(0, {2, 2}, 1.0f);
    SoftMask big_gt(0, {10, 10});
    std::fill(big_gt.values.begin(), big_gt.values.begin() + 96, 1.0f);
    const std::vector<GroundingItem> pair{{small, small, std::nullopt}, {SoftMask(0, {10, 10}), big_gt, std::nullopt}};
    const auto bias = grounding_scores(pair);
    const bool bias_ok = bias.giou == 0.5 && bias.ciou == 0.04;
    return {mismatches == 0 && single_mismatch == 0 && bias_ok,
            "mIoU mismatches " + std::to_string(mismatches) + ", single-item gIoU!=cIoU " +
                std::to_string(single_mismatch) + ", area-bias (" + fmt("%.6f", bias.giou) + ", " +
                fmt("%.6f", bias.ciou) + ")"};
}

Verdict delegate_equivalence() {
    Rng rng(1005);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const Grid grid{1 + trial % 6, 1 + (trial / 6) % 6};
        const std::size_t d = 1 + static_cast<std::size_t>(trial % 8);
        const PatchFeatures values{random_matrix(rng, grid.area(), d), grid};
        PatchMask m = random_patch_mask(rng, grid, 0, 0.4);
        m.values[0] = std::max(m.values[0], 0.05f);
        PatchMask mean_mask = m;
        const auto attended = std::count_if(m.values.begin(), m.values.end(), [](float v) { return v != 0.0f; });
        for (float& v : mean_mask.values) {
            v = v != 0.0f ? 1.0f / static_cast<float>(attended) : 0.0f;
        }
        const auto a = pool_regions_delegate(values, std::vector<PatchMask>{m}, HeadSpec{});
        const auto b = pool_regions(values, std::vector<PatchMask>{mean_mask});
        for (std::size_t k = 0; k < d; ++k) {
            const double want = b.tokens(0, k);
            worst = std::max(worst, std::abs(a.tokens(0, k) - want) / std::max(1.0, std::abs(want)));
        }
    }
    return {worst <= 1e-6, "100 cases, max rel err " + fmt("%.2e", worst)};
}

Verdict format_round_trip() {
    Rng rng(1006);
    int bundle_failures = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const FeatureBundle b = random_bundle(rng);
        const auto bytes = encode_bundle(b);
        const FeatureBundle back = read_bundle(bytes);
        bundle_failures += (back == b && encode_bundle(back) == bytes) ? 0 : 1;
    }
    int mask_failures = 0;
    double worst = 0.0;
    std::uniform_int_distribution<int> side(1, 24);
    for (int trial = 0; trial < 100; ++trial) {
        const Grid size{side(rng), side(rng)};
        std::vector<SoftMask> raw;
        for (int r = 0; r < 1 + trial % 5; ++r) {
            raw.push_back(random_soft_mask(rng, size, r));
        }
        const MaskSet set = MaskSet::from_masks(size, raw, trial % 4 != 0);
        const auto bytes = encode_mask_set(set);
        const MaskSet back = load_mask_set(bytes);
        mask_failures += (back == set && encode_mask_set(back) == bytes) ? 0 : 1;
        if (set.soft) {
            for (std::size_t r = 0; r < raw.size(); ++r) {
                for (std::size_t p = 0; p < raw[r].values.size(); ++p) {
                    worst = std::max(worst, static_cast<double>(std::abs(back.masks[r].values[p] - raw[r].values[p])));
                }
            }
        }
    }
    const bool ok = bundle_failures == 0 && mask_failures == 0 && worst <= 1.0 / 255.0;
    return {ok, "bundle failures " + std::to_string(bundle_failures) + ", mask-set failures " +
                    std::to_string(mask_failures) + ", max u8 error " + fmt("%.6f", worst) + " (limit " +
                    fmt("%.6f", 1.0 / 255.0) + ")"};
}

Verdict throughput() {
    const auto dir = scratch_dir("acceptance_throughput");
    PartitionSpec spec;
    spec.band_rows = 5;
    spec.band_cols = 10;
    spec.dim = 512;
    const Fixture f = make_partition_fixture(spec);
    write_fixture(f, dir, "img");
    std::string err;
    const auto t0 = Clock::now();
    const int code = run_cli(cat({"segment"}, dir_args(dir, "out")), &err);
    const double elapsed = seconds_since(t0);
    if (code != 0) {
        return {false, "segment exited " + std::to_string(code) + ": " + err};
    }
    const double m = oracle_miou(read_label_map(dir / "out" / "img_labels.png"), f.gt, spec.classes);
    return {elapsed < 1.0 && m == 1.0, "64x64, " + std::to_string(f.masks.masks.size()) + " regions, d=512: " +
                                           fmt("%.3f", elapsed) + " s single-threaded, mIoU " + fmt("%.6f", m)};
}

} // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"pooling oracle", pooling_oracle},
        {"argmax invariance", argmax_invariance},
        {"bilinear oracle", bilinear_oracle},
        {"partition fixture", partition_fixture},
        {"global-filter poisoning fixture", poisoning_fixture},
        {"metric oracles", metric_oracles},
        {"delegate equivalence", delegate_equivalence},
        {"format round-trip", format_round_trip},
        {"throughput budget", throughput},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        std::printf("%s  %-32s %s\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
        failed += v.pass ? 0 : 1;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
