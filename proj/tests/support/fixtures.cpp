#include "fixtures.hpp"

#include "textregion/png_io.hpp"

#include <cmath>

namespace textregion::testing {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, float lo, float hi) {
    std::uniform_real_distribution<float> dist(lo, hi);
    Matrix m(rows, cols);
    for (float& v : m.data()) {
        v = dist(rng);
    }
    return m;
}

std::vector<float> random_unit(Rng& rng, std::size_t dim) {
    std::normal_distribution<double> dist;
    std::vector<double> v(dim);
    double len = 0.0;
    while (len < 1e-3) {
        len = 0.0;
        for (double& x : v) {
            x = dist(rng);
            len += x * x;
        }
        len = std::sqrt(len);
    }
    std::vector<float> out(dim);
    for (std::size_t k = 0; k < dim; ++k) {
        out[k] = static_cast<float>(v[k] / len);
    }
    return out;
}

Matrix random_orthonormal(Rng& rng, std::size_t count, std::size_t dim) {
    std::normal_distribution<double> dist;
    std::vector<std::vector<double>> basis;
    while (basis.size() < count) {
        std::vector<double> v(dim);
        for (double& x : v) {
            x = dist(rng);
        }
        for (const auto& b : basis) {
            double p = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                p += v[k] * b[k];
            }
            for (std::size_t k = 0; k < dim; ++k) {
                v[k] -= p * b[k];
            }
        }
        double len = 0.0;
        for (double x : v) {
            len += x * x;
        }
        len = std::sqrt(len);
        if (len < 1e-6) {
            continue;
        }
        for (double& x : v) {
            x /= len;
        }
        basis.push_back(std::move(v));
    }
    Matrix out(count, dim);
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t k = 0; k < dim; ++k) {
            out(r, k) = static_cast<float>(basis[r][k]);
        }
    }
    return out;
}

SoftMask random_soft_mask(Rng& rng, Grid size, int id) {
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    SoftMask m(id, size);
    for (float& v : m.values) {
        v = dist(rng);
    }
    return m;
}

PatchMask random_patch_mask(Rng& rng, Grid grid, int id, double zero_fraction) {
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::bernoulli_distribution zero(zero_fraction);
    PatchMask m{id, grid, std::vector<float>(grid.area())};
    for (float& v : m.values) {
        v = zero(rng) ? 0.0f : dist(rng);
    }
    return m;
}

FeatureBundle random_bundle(Rng& rng) {
    std::uniform_int_distribution<int> pick(1, 6);
    FeatureBundle b;
    b.model_id = "model-" + std::to_string(pick(rng));
    const int d = pick(rng);
    b.embed_dim = d;
    const Grid full{pick(rng), pick(rng)};
    b.full_grid = full;
    b.image_size = {full.rows * 14, full.cols * 14};
    b.fusion_weight = 0.25 * pick(rng);
    b.temperature = 10.0 * pick(rng);
    const bool half = pick(rng) % 2 == 0;
    auto feature = [&](Grid g) {
        const Matrix m = random_matrix(rng, g.area(), static_cast<std::size_t>(d));
        const std::vector<std::int64_t> shape{static_cast<std::int64_t>(g.area()), d};
        return half ? Tensor::from_f16(shape, m.data()) : Tensor::from_f32(shape, m.data());
    };
    b.tensors["values_full"] = feature(full);
    if (pick(rng) % 2 == 0) {
        b.tensors["simfeat_full"] = feature(full);
    }
    if (pick(rng) % 2 == 0 && !b.has("simfeat_full")) {
        CropLayout layout = plan_crops(b.image_size, 14 * pick(rng));
        layout.crop_grid = {pick(rng), pick(rng)};
        b.crop_layout = layout;
        b.tensors["values_crops"] = feature(layout.stitched_grid());
    }
    int token_dim = d;
    if (pick(rng) % 3 == 0) {
        HeadSpec head;
        const int hidden = pick(rng);
        const int out = pick(rng);
        head.post_pool_layers.emplace_back(LayerNormLayer{std::vector<float>(d, 1.0f), std::vector<float>(d, 0.5f), 1e-6});
        head.post_pool_layers.emplace_back(ResidualMlpLayer{random_matrix(rng, hidden, d), std::vector<float>(hidden, 0.1f),
                                                            random_matrix(rng, d, hidden), std::vector<float>(d, 0.2f),
                                                            Activation::gelu_exact});
        head.post_pool_layers.emplace_back(LinearLayer{random_matrix(rng, out, d), std::vector<float>(out, 0.0f)});
        b.head = head;
        token_dim = out;
    }
    if (pick(rng) % 2 == 0) {
        const int classes = pick(rng);
        b.tensors["labels"] = Tensor::from_matrix(random_matrix(rng, classes, token_dim));
        for (int c = 0; c < classes; ++c) {
            b.label_names.push_back("label " + std::to_string(c));
        }
    }
    if (pick(rng) % 2 == 0) {
        std::vector<float> raw(static_cast<std::size_t>(pick(rng)));
        b.tensors["aux"] = Tensor::from_f32({static_cast<std::int64_t>(raw.size())}, raw);
    }
    return b;
}

namespace {

// Band b of n over `extent` cells: earlier bands absorb the remainder.
std::vector<int> band_starts(int extent, int n) {
    std::vector<int> starts;
    const int base = extent / n;
    const int extra = extent % n;
    int at = 0;
    for (int b = 0; b <= n; ++b) {
        starts.push_back(at);
        at += base + (b < extra ? 1 : 0);
    }
    return starts;
}

Fixture assemble(const std::vector<int>& patch_label_of_region, const std::vector<int>& patch_region, int grid,
                 int patch_px, int uncovered_rows, const Matrix& labels, const Matrix& values,
                 const std::string& model_id) {
    const int image = grid * patch_px;
    const Grid size{image, image};
    const int regions = static_cast<int>(patch_label_of_region.size());

    Fixture f;
    f.region_label = patch_label_of_region;
    f.bundle.model_id = model_id;
    f.bundle.image_size = size;
    f.bundle.embed_dim = static_cast<int>(values.cols());
    f.bundle.full_grid = Grid{grid, grid};
    f.bundle.temperature = 100.0;
    f.bundle.tensors["values_full"] = Tensor::from_matrix(values);
    f.bundle.tensors["labels"] = Tensor::from_matrix(labels);
    for (std::size_t c = 0; c < labels.rows(); ++c) {
        f.bundle.label_names.push_back("class" + std::to_string(c));
    }

    std::vector<SoftMask> masks;
    for (int r = 0; r < regions; ++r) {
        masks.emplace_back(r, size);
    }
    f.gt.assign(size.area(), 255);
    for (int y = 0; y < image - uncovered_rows; ++y) {
        for (int x = 0; x < image; ++x) {
            const int region = patch_region[static_cast<std::size_t>((y / patch_px) * grid + x / patch_px)];
            masks[static_cast<std::size_t>(region)].at(y, x) = 1.0f;
            f.gt[static_cast<std::size_t>(y) * image + x] = patch_label_of_region[static_cast<std::size_t>(region)];
        }
    }
    f.masks = MaskSet::from_masks(size, std::move(masks), true, {{"generator", "synthetic"}});
    return f;
}

} // namespace

Fixture make_partition_fixture(const PartitionSpec& spec) {
    Rng rng(spec.seed);
    const int grid = spec.image_px / spec.patch_px;
    const Matrix labels = random_orthonormal(rng, static_cast<std::size_t>(spec.classes),
                                             static_cast<std::size_t>(spec.dim));
    const auto rows = band_starts(grid, spec.band_rows);
    const auto cols = band_starts(grid, spec.band_cols);

    std::vector<int> patch_region(static_cast<std::size_t>(grid * grid));
    std::vector<int> region_label;
    for (int br = 0; br < spec.band_rows; ++br) {
        for (int bc = 0; bc < spec.band_cols; ++bc) {
            const int region = br * spec.band_cols + bc;
            region_label.push_back(region % spec.classes);
            for (int y = rows[static_cast<std::size_t>(br)]; y < rows[static_cast<std::size_t>(br) + 1]; ++y) {
                for (int x = cols[static_cast<std::size_t>(bc)]; x < cols[static_cast<std::size_t>(bc) + 1]; ++x) {
                    patch_region[static_cast<std::size_t>(y * grid + x)] = region;
                }
            }
        }
    }
    Matrix values(static_cast<std::size_t>(grid * grid), static_cast<std::size_t>(spec.dim));
    for (std::size_t i = 0; i < patch_region.size(); ++i) {
        const auto label = static_cast<std::size_t>(region_label[static_cast<std::size_t>(patch_region[i])]);
        const auto src = labels.row(label);
        std::copy(src.begin(), src.end(), values.row(i).begin());
    }
    return assemble(region_label, patch_region, grid, spec.patch_px, spec.uncovered_rows, labels, values,
                    "synthetic-partition");
}

Fixture make_poison_fixture(const PoisonSpec& spec) {
    constexpr int grid = 16;
    const auto dim = static_cast<std::size_t>(spec.dim);
    Matrix labels(4, dim);
    labels(0, 0) = 1.0f;
    labels(1, 1) = 1.0f;
    labels(2, 2) = 1.0f;
    // Label 3 is "generic": close to the mean of the others.
    const double g = 0.9 / std::sqrt(3.0);
    labels(3, 0) = static_cast<float>(g);
    labels(3, 1) = static_cast<float>(g);
    labels(3, 2) = static_cast<float>(g);
    labels(3, 3) = static_cast<float>(std::sqrt(1.0 - 0.81));

    std::vector<int> patch_region(grid * grid);
    for (int y = 0; y < grid; ++y) {
        for (int x = 0; x < grid; ++x) {
            int region = y < 8 ? 1 : (x < 8 ? 2 : 3);
            if (y < 2 && x < 3) {
                region = 0;
            }
            patch_region[static_cast<std::size_t>(y * grid + x)] = region;
        }
    }
    Matrix values(grid * grid, dim);
    for (std::size_t i = 0; i < patch_region.size(); ++i) {
        const auto src = labels.row(static_cast<std::size_t>(patch_region[i]));
        std::copy(src.begin(), src.end(), values.row(i).begin());
    }
    const std::size_t global_patch = 1 * grid + 2;
    for (std::size_t k = 0; k < dim; ++k) {
        double mean = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            mean += labels(c, k);
        }
        values(global_patch, k) = static_cast<float>(spec.global_scale * mean / 4.0);
    }
    return assemble({0, 1, 2, 3}, patch_region, grid, 4, 0, labels, values, "synthetic-poison");
}

void write_fixture(const Fixture& f, const std::filesystem::path& dir, const std::string& id) {
    std::filesystem::create_directories(dir / "bundles");
    std::filesystem::create_directories(dir / "masks");
    std::filesystem::create_directories(dir / "gt");
    save_bundle(f.bundle, dir / "bundles" / (id + ".txrb"));
    save_mask_set(f.masks, dir / "masks" / (id + ".txrm"));
    std::vector<std::uint8_t> gt(f.gt.size());
    std::transform(f.gt.begin(), f.gt.end(), gt.begin(), [](int v) { return static_cast<std::uint8_t>(v); });
    write_indexed_png(dir / "gt" / (id + ".png"), f.bundle.image_size, gt, class_palette());
}

std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("textregion_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<int> read_label_map(const std::filesystem::path& png) {
    const LabelImage img = read_label_png(png);
    return {img.values.begin(), img.values.end()};
}

} // namespace textregion::testing
