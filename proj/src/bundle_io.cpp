#include "textregion/bundle_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>

namespace textregion {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

using json = nlohmann::json;

namespace {

constexpr char kBundleMagic[4] = {'T', 'X', 'R', 'B'};
constexpr char kMaskMagic[4] = {'T', 'X', 'R', 'M'};
constexpr std::size_t kPreambleSize = 16; // magic + version + header length
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;

[[noreturn]] void fail(FormatError::Kind kind, const std::string& what) { throw FormatError(kind, what); }

std::size_t align_up(std::size_t n) {
    return (n + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
}

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get_le(std::span<const std::byte> in, std::size_t at) {
    T value{};
    std::memcpy(&value, in.data() + at, sizeof(T));
    return value;
}

DType dtype_from_string(const std::string& s) {
    if (s == "f32") {
        return DType::f32;
    }
    if (s == "f16") {
        return DType::f16;
    }
    if (s == "u8") {
        return DType::u8;
    }
    fail(FormatError::Kind::invalid_header, "unknown dtype '" + s + "'");
}

std::uint64_t element_product(const std::vector<std::int64_t>& shape, const std::string& name) {
    std::uint64_t count = 1;
    for (std::int64_t extent : shape) {
        if (extent <= 0) {
            fail(FormatError::Kind::shape_mismatch,
                 "tensor '" + name + "' has non-positive extent " + std::to_string(extent));
        }
        if (count > kMaxElements / static_cast<std::uint64_t>(extent)) {
            fail(FormatError::Kind::shape_mismatch, "tensor '" + name + "' shape is too large");
        }
        count *= static_cast<std::uint64_t>(extent);
    }
    return count;
}

json grid_json(Grid g) { return json::array({g.rows, g.cols}); }

Grid grid_from(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
        fail(FormatError::Kind::invalid_header, std::string(what) + " must be a [rows, cols] pair");
    }
    return {j[0].get<int>(), j[1].get<int>()};
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
    std::string s = "[";
    for (std::size_t k = 0; k < shape.size(); ++k) {
        s += (k ? "," : "") + std::to_string(shape[k]);
    }
    return s + "]";
}

void check_invariant(bool ok, const std::string& what) {
    if (!ok) {
        fail(FormatError::Kind::invariant, what);
    }
}

void check_feature_shape(const FeatureBundle& b, const std::string& name, Grid grid) {
    const Tensor& t = b.tensor(name);
    check_invariant(t.dtype != DType::u8, "tensor '" + name + "' must be f32 or f16");
    const std::vector<std::int64_t> want = {static_cast<std::int64_t>(grid.area()), b.embed_dim};
    check_invariant(t.shape == want, "tensor '" + name + "' has shape " + shape_string(t.shape) +
                                         ", expected " + shape_string(want));
}

// ---------------------------------------------------------------------------
// Head (de)serialization: layer parameters travel as "head.<i>.<param>" tensors.

std::string head_key(std::size_t layer, const char* param) {
    return "head." + std::to_string(layer) + "." + param;
}

json head_to_json(const HeadSpec& head, std::map<std::string, Tensor>& out) {
    json layers = json::array();
    for (std::size_t i = 0; i < head.post_pool_layers.size(); ++i) {
        const auto& layer = head.post_pool_layers[i];
        json entry;
        if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
            entry["kind"] = "linear";
            out[head_key(i, "weight")] = Tensor::from_matrix(lin->weight);
            out[head_key(i, "bias")] =
                Tensor::from_f32({static_cast<std::int64_t>(lin->bias.size())}, lin->bias);
        } else if (const auto* ln = std::get_if<LayerNormLayer>(&layer)) {
            entry["kind"] = "layer_norm";
            entry["epsilon"] = ln->epsilon;
            out[head_key(i, "scale")] =
                Tensor::from_f32({static_cast<std::int64_t>(ln->scale.size())}, ln->scale);
            out[head_key(i, "shift")] =
                Tensor::from_f32({static_cast<std::int64_t>(ln->shift.size())}, ln->shift);
        } else {
            const auto& mlp = std::get<ResidualMlpLayer>(layer);
            entry["kind"] = "residual_mlp";
            entry["activation"] = std::string(to_string(mlp.activation));
            out[head_key(i, "w1")] = Tensor::from_matrix(mlp.w1);
            out[head_key(i, "b1")] = Tensor::from_f32({static_cast<std::int64_t>(mlp.b1.size())}, mlp.b1);
            out[head_key(i, "w2")] = Tensor::from_matrix(mlp.w2);
            out[head_key(i, "b2")] = Tensor::from_f32({static_cast<std::int64_t>(mlp.b2.size())}, mlp.b2);
        }
        layers.push_back(std::move(entry));
    }
    return {{"enabled", head.enabled}, {"layers", std::move(layers)}};
}

HeadSpec head_from_json(const json& j, std::map<std::string, Tensor>& tensors) {
    auto take = [&tensors](const std::string& key) {
        auto it = tensors.find(key);
        if (it == tensors.end()) {
            fail(FormatError::Kind::invalid_header, "head parameter '" + key + "' missing");
        }
        Tensor t = std::move(it->second);
        tensors.erase(it);
        return t;
    };
    auto vec = [&take](const std::string& key) {
        Tensor t = take(key);
        if (t.shape.size() != 1) {
            fail(FormatError::Kind::shape_mismatch, "head parameter '" + key + "' must be rank 1");
        }
        return t.to_f32();
    };
    auto mat = [&take](const std::string& key) {
        Tensor t = take(key);
        if (t.shape.size() != 2) {
            fail(FormatError::Kind::shape_mismatch, "head parameter '" + key + "' must be rank 2");
        }
        return t.to_matrix();
    };

    HeadSpec head;
    head.enabled = j.at("enabled").get<bool>();
    const json& layers = j.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string kind = layers[i].at("kind").get<std::string>();
        if (kind == "linear") {
            LinearLayer lin{mat(head_key(i, "weight")), vec(head_key(i, "bias"))};
            head.post_pool_layers.emplace_back(std::move(lin));
        } else if (kind == "layer_norm") {
            LayerNormLayer ln{vec(head_key(i, "scale")), vec(head_key(i, "shift")),
                              layers[i].at("epsilon").get<double>()};
            head.post_pool_layers.emplace_back(std::move(ln));
        } else if (kind == "residual_mlp") {
            ResidualMlpLayer mlp;
            mlp.w1 = mat(head_key(i, "w1"));
            mlp.b1 = vec(head_key(i, "b1"));
            mlp.w2 = mat(head_key(i, "w2"));
            mlp.b2 = vec(head_key(i, "b2"));
            try {
                mlp.activation = activation_from_string(layers[i].at("activation").get<std::string>());
            } catch (const std::invalid_argument& e) {
                fail(FormatError::Kind::invalid_header, e.what());
            }
            head.post_pool_layers.emplace_back(std::move(mlp));
        } else {
            fail(FormatError::Kind::invalid_header, "unknown head layer kind '" + kind + "'");
        }
    }
    return head;
}

struct Preamble {
    json header;
    std::size_t payload_start = 0;
};

Preamble read_preamble(std::span<const std::byte> source, const char (&magic)[4], const char* what) {
    if (source.size() < sizeof(magic)) {
        fail(FormatError::Kind::truncated, std::string(what) + " truncated before magic");
    }
    if (std::memcmp(source.data(), magic, sizeof(magic)) != 0) {
        fail(FormatError::Kind::bad_magic, std::string(what) + " has bad magic (expected '" +
                                               std::string(magic, sizeof(magic)) + "')");
    }
    if (source.size() < kPreambleSize) {
        fail(FormatError::Kind::truncated, std::string(what) + " truncated in preamble");
    }
    const auto version = get_le<std::uint32_t>(source, 4);
    if (version != kFormatVersion) {
        fail(FormatError::Kind::unsupported_version,
             std::string(what) + " version " + std::to_string(version) + " is not supported");
    }
    const auto header_len = get_le<std::uint64_t>(source, 8);
    if (header_len > source.size() - kPreambleSize) {
        fail(FormatError::Kind::truncated, std::string(what) + " truncated in header");
    }
    const auto* first = reinterpret_cast<const char*>(source.data() + kPreambleSize);
    Preamble p;
    try {
        p.header = json::parse(first, first + header_len);
    } catch (const json::exception& e) {
        fail(FormatError::Kind::invalid_header, std::string(what) + " header is not valid JSON: " + e.what());
    }
    if (!p.header.is_object()) {
        fail(FormatError::Kind::invalid_header, std::string(what) + " header is not a JSON object");
    }
    p.payload_start = kPreambleSize + static_cast<std::size_t>(header_len);
    return p;
}

std::vector<std::byte> assemble(const char (&magic)[4], const std::string& header) {
    std::vector<std::byte> out;
    const auto* m = reinterpret_cast<const std::byte*>(magic);
    out.insert(out.end(), m, m + 4);
    put_le<std::uint32_t>(out, kFormatVersion);
    put_le<std::uint64_t>(out, header.size());
    const auto* h = reinterpret_cast<const std::byte*>(header.data());
    out.insert(out.end(), h, h + header.size());
    return out;
}

} // namespace

std::size_t byte_width(DType t) {
    switch (t) {
    case DType::f32:
        return 4;
    case DType::f16:
        return 2;
    case DType::u8:
        return 1;
    }
    return 0;
}

std::string_view to_string(DType t) {
    switch (t) {
    case DType::f32:
        return "f32";
    case DType::f16:
        return "f16";
    case DType::u8:
        return "u8";
    }
    return "?";
}

// ---------------------------------------------------------------------------

Tensor Tensor::from_f32(std::vector<std::int64_t> shape, std::span<const float> values) {
    Tensor t;
    t.dtype = DType::f32;
    t.shape = std::move(shape);
    if (t.element_count() != values.size()) {
        throw std::invalid_argument("Tensor::from_f32: value count does not match shape");
    }
    const auto bytes = std::as_bytes(values);
    t.bytes.assign(bytes.begin(), bytes.end());
    return t;
}

Tensor Tensor::from_f16(std::vector<std::int64_t> shape, std::span<const float> values) {
    Tensor t;
    t.dtype = DType::f16;
    t.shape = std::move(shape);
    if (t.element_count() != values.size()) {
        throw std::invalid_argument("Tensor::from_f16: value count does not match shape");
    }
    t.bytes.resize(values.size() * 2);
    for (std::size_t k = 0; k < values.size(); ++k) {
        const std::uint16_t h = float_to_half(values[k]);
        std::memcpy(t.bytes.data() + 2 * k, &h, 2);
    }
    return t;
}

Tensor Tensor::from_matrix(const Matrix& m) {
    return from_f32({static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())}, m.data());
}

std::size_t Tensor::element_count() const {
    std::size_t n = 1;
    for (auto extent : shape) {
        n *= static_cast<std::size_t>(extent);
    }
    return n;
}

std::vector<float> Tensor::to_f32() const {
    const std::size_t n = element_count();
    std::vector<float> out(n);
    switch (dtype) {
    case DType::f32:
        std::memcpy(out.data(), bytes.data(), n * 4);
        break;
    case DType::f16:
        for (std::size_t k = 0; k < n; ++k) {
            std::uint16_t h = 0;
            std::memcpy(&h, bytes.data() + 2 * k, 2);
            out[k] = half_to_float(h);
        }
        break;
    case DType::u8:
        for (std::size_t k = 0; k < n; ++k) {
            out[k] = static_cast<float>(std::to_integer<std::uint8_t>(bytes[k]));
        }
        break;
    }
    return out;
}

Matrix Tensor::to_matrix() const {
    if (shape.size() != 2) {
        throw std::invalid_argument("Tensor::to_matrix: rank " + std::to_string(shape.size()) + " tensor");
    }
    return {static_cast<std::size_t>(shape[0]), static_cast<std::size_t>(shape[1]), to_f32()};
}

// ---------------------------------------------------------------------------

const Tensor& FeatureBundle::tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        fail(FormatError::Kind::invariant, "bundle has no tensor '" + name + "'");
    }
    return it->second;
}

void FeatureBundle::validate() const {
    check_invariant(image_size.rows > 0 && image_size.cols > 0, "image size must be positive");
    check_invariant(embed_dim > 0, "embed_dim must be positive");
    check_invariant(std::isfinite(fusion_weight) && fusion_weight > 0.0, "fusion weight must be > 0");
    check_invariant(std::isfinite(temperature) && temperature > 0.0, "temperature must be > 0");

    for (const auto& [name, t] : tensors) {
        check_invariant(!name.empty(), "tensor name must not be empty");
        check_invariant(name.rfind("head.", 0) != 0, "tensor name '" + name + "' uses the reserved head. prefix");
        const std::uint64_t count = element_product(t.shape, name);
        if (t.bytes.size() != count * byte_width(t.dtype)) {
            fail(FormatError::Kind::shape_mismatch, "tensor '" + name + "' holds " +
                                                        std::to_string(t.bytes.size()) + " bytes for shape " +
                                                        shape_string(t.shape));
        }
    }

    check_invariant(full_grid.has_value() == has("values_full"),
                    "full_grid must be present exactly when values_full is");
    if (full_grid) {
        check_invariant(full_grid->rows > 0 && full_grid->cols > 0, "full grid must be positive");
        check_feature_shape(*this, "values_full", *full_grid);
        if (has("simfeat_full")) {
            check_feature_shape(*this, "simfeat_full", *full_grid);
        }
    }
    check_invariant(!has("simfeat_full") || full_grid, "simfeat_full requires values_full");

    check_invariant(crop_layout.has_value() == has("values_crops"),
                    "crop_layout must be present exactly when values_crops is");
    if (crop_layout) {
        try {
            crop_layout->validate();
        } catch (const std::invalid_argument& e) {
            fail(FormatError::Kind::invariant, e.what());
        }
        check_invariant(crop_layout->crop_grid.rows > 0 && crop_layout->crop_grid.cols > 0,
                        "crop patch grid must be positive");
        check_invariant(full_grid.has_value(), "values_crops requires values_full");
        check_feature_shape(*this, "values_crops", crop_layout->stitched_grid());
        if (has("simfeat_crops")) {
            check_feature_shape(*this, "simfeat_crops", crop_layout->stitched_grid());
        }
    }
    check_invariant(!has("simfeat_crops") || crop_layout, "simfeat_crops requires values_crops");
    check_invariant(has("simfeat_crops") || !has("simfeat_full") || !crop_layout,
                    "simfeat_full without simfeat_crops in a multi-resolution bundle");

    int token_dim = embed_dim;
    if (head) {
        try {
            token_dim = head->output_dim(embed_dim);
        } catch (const std::invalid_argument& e) {
            fail(FormatError::Kind::invariant, e.what());
        }
    }
    if (has("labels")) {
        const Tensor& labels = tensor("labels");
        check_invariant(labels.shape.size() == 2, "labels must be rank 2");
        check_invariant(labels.shape[1] == token_dim,
                        "labels width " + std::to_string(labels.shape[1]) + " does not match token dim " +
                            std::to_string(token_dim));
        check_invariant(static_cast<std::int64_t>(label_names.size()) == labels.shape[0],
                        "label_names count does not match labels rows");
    } else {
        check_invariant(label_names.empty(), "label_names given without a labels tensor");
    }
}

// ---------------------------------------------------------------------------

std::vector<std::byte> encode_bundle(const FeatureBundle& bundle) {
    bundle.validate();

    std::map<std::string, Tensor> head_tensors;
    json header;
    header["model_id"] = bundle.model_id;
    header["image_size"] = grid_json(bundle.image_size);
    header["embed_dim"] = bundle.embed_dim;
    header["full_grid"] = bundle.full_grid ? grid_json(*bundle.full_grid) : json(nullptr);
    if (bundle.crop_layout) {
        const CropLayout& l = *bundle.crop_layout;
        header["crop_layout"] = {{"grid", grid_json(l.grid)},
                                 {"crop_px", l.crop_px},
                                 {"resized", grid_json(l.resized)},
                                 {"crop_grid", grid_json(l.crop_grid)}};
    } else {
        header["crop_layout"] = nullptr;
    }
    header["fusion_weight"] = bundle.fusion_weight;
    header["temperature"] = bundle.temperature;
    header["label_names"] = bundle.label_names;
    header["head"] = bundle.head ? head_to_json(*bundle.head, head_tensors) : json(nullptr);

    std::vector<std::pair<const std::string*, const Tensor*>> ordered;
    for (const auto& [name, t] : bundle.tensors) {
        ordered.emplace_back(&name, &t);
    }
    for (const auto& [name, t] : head_tensors) {
        ordered.emplace_back(&name, &t);
    }
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return *a.first < *b.first; });

    json records = json::array();
    std::uint64_t cursor = 0;
    for (const auto& [name, t] : ordered) {
        cursor = align_up(cursor);
        records.push_back({{"name", *name},
                           {"dtype", std::string(to_string(t->dtype))},
                           {"shape", t->shape},
                           {"offset", cursor},
                           {"length", t->bytes.size()}});
        cursor += t->bytes.size();
    }
    header["tensors"] = std::move(records);

    std::vector<std::byte> out = assemble(kBundleMagic, header.dump());
    out.resize(align_up(out.size()), std::byte{0});
    const std::size_t payload_start = out.size();
    for (std::size_t k = 0; k < ordered.size(); ++k) {
        const std::size_t at = payload_start + header["tensors"][k]["offset"].get<std::size_t>();
        out.resize(at, std::byte{0});
        const auto& bytes = ordered[k].second->bytes;
        out.insert(out.end(), bytes.begin(), bytes.end());
    }
    return out;
}

std::uint64_t write_bundle(const FeatureBundle& bundle, std::ostream& sink) {
    const auto bytes = encode_bundle(bundle);
    sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    sink.flush();
    if (!sink) {
        throw IoError("failed writing bundle to sink");
    }
    return bytes.size();
}

void save_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
    const auto bytes = encode_bundle(bundle);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

nlohmann::json bundle_header(std::span<const std::byte> source) {
    return read_preamble(source, kBundleMagic, "bundle").header;
}

FeatureBundle read_bundle(std::span<const std::byte> source) {
    Preamble pre = read_preamble(source, kBundleMagic, "bundle");
    const std::size_t payload_start = align_up(pre.payload_start);
    if (source.size() < payload_start) {
        fail(FormatError::Kind::truncated, "bundle truncated in header padding");
    }
    const std::size_t payload_size = source.size() - payload_start;

    FeatureBundle b;
    std::map<std::string, Tensor> all;
    try {
        const json& h = pre.header;
        b.model_id = h.at("model_id").get<std::string>();
        b.image_size = grid_from(h.at("image_size"), "image_size");
        b.embed_dim = h.at("embed_dim").get<int>();
        if (!h.at("full_grid").is_null()) {
            b.full_grid = grid_from(h.at("full_grid"), "full_grid");
        }
        if (const json& cl = h.at("crop_layout"); !cl.is_null()) {
            CropLayout l;
            l.grid = grid_from(cl.at("grid"), "crop_layout.grid");
            l.crop_px = cl.at("crop_px").get<int>();
            l.resized = grid_from(cl.at("resized"), "crop_layout.resized");
            l.crop_grid = grid_from(cl.at("crop_grid"), "crop_layout.crop_grid");
            b.crop_layout = l;
        }
        b.fusion_weight = h.at("fusion_weight").get<double>();
        b.temperature = h.at("temperature").get<double>();
        b.label_names = h.at("label_names").get<std::vector<std::string>>();

        std::uint64_t prev_end = 0;
        for (const json& r : h.at("tensors")) {
            TensorRecord rec;
            rec.name = r.at("name").get<std::string>();
            rec.dtype = dtype_from_string(r.at("dtype").get<std::string>());
            rec.shape = r.at("shape").get<std::vector<std::int64_t>>();
            rec.offset = r.at("offset").get<std::uint64_t>();
            rec.length = r.at("length").get<std::uint64_t>();

            const std::uint64_t count = element_product(rec.shape, rec.name);
            if (rec.length != count * byte_width(rec.dtype)) {
                fail(FormatError::Kind::shape_mismatch,
                     "tensor '" + rec.name + "' declares length " + std::to_string(rec.length) + " for " +
                         std::string(to_string(rec.dtype)) + " shape " + shape_string(rec.shape) + " (" +
                         std::to_string(count * byte_width(rec.dtype)) + " bytes)");
            }
            if (rec.offset % kPayloadAlignment != 0) {
                fail(FormatError::Kind::invalid_header, "tensor '" + rec.name + "' offset is not 64-aligned");
            }
            if (rec.offset < prev_end) {
                fail(FormatError::Kind::invalid_header, "tensor '" + rec.name + "' overlaps or is out of order");
            }
            if (rec.offset > payload_size || rec.length > payload_size - rec.offset) {
                fail(FormatError::Kind::truncated, "payload truncated in tensor '" + rec.name + "'");
            }
            if (all.contains(rec.name)) {
                fail(FormatError::Kind::invalid_header, "duplicate tensor '" + rec.name + "'");
            }
            prev_end = rec.offset + rec.length;

            Tensor t;
            t.dtype = rec.dtype;
            t.shape = std::move(rec.shape);
            const auto* first = source.data() + payload_start + rec.offset;
            t.bytes.assign(first, first + rec.length);
            all.emplace(rec.name, std::move(t));
        }
        if (prev_end != payload_size) {
            fail(FormatError::Kind::invalid_header, "bundle has trailing bytes after the last tensor");
        }
        if (const json& hj = h.at("head"); !hj.is_null()) {
            b.head = head_from_json(hj, all);
        }
    } catch (const json::exception& e) {
        fail(FormatError::Kind::invalid_header, std::string("bundle header: ") + e.what());
    }
    b.tensors = std::move(all);
    b.validate();
    return b;
}

FeatureBundle read_bundle(std::istream& source) {
    std::vector<char> raw{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
    if (source.bad()) {
        throw IoError("failed reading bundle source");
    }
    return read_bundle(std::as_bytes(std::span<const char>(raw)));
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "'");
    }
    std::vector<char> raw{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (in.bad()) {
        throw IoError("failed reading '" + path.string() + "'");
    }
    const auto bytes = std::as_bytes(std::span<const char>(raw));
    return {bytes.begin(), bytes.end()};
}

FeatureBundle load_bundle(const std::filesystem::path& path) { return read_bundle(read_file(path)); }

// ---------------------------------------------------------------------------

Rle encode_rle(std::span<const std::uint8_t> binary) {
    Rle runs;
    std::uint8_t current = 0;
    std::uint32_t count = 0;
    for (std::uint8_t v : binary) {
        const std::uint8_t bit = v ? 1 : 0;
        if (bit != current) {
            runs.push_back(count);
            current = bit;
            count = 0;
        }
        ++count;
    }
    runs.push_back(count);
    return runs;
}

std::vector<std::uint8_t> decode_rle(const Rle& runs, std::size_t area) {
    std::uint64_t total = 0;
    for (auto r : runs) {
        total += r;
    }
    if (total != area) {
        fail(FormatError::Kind::shape_mismatch,
             "RLE runs total " + std::to_string(total) + " but the image has " + std::to_string(area) + " pixels");
    }
    std::vector<std::uint8_t> out(area, 0);
    std::size_t at = 0;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        if (k % 2 == 1) {
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(at), runs[k], std::uint8_t{1});
        }
        at += runs[k];
    }
    return out;
}

std::uint8_t quantize_unit(float v) {
    const float clamped = std::clamp(std::isnan(v) ? 0.0f : v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

MaskSet MaskSet::from_masks(Grid image_size, std::vector<SoftMask> masks, bool soft, nlohmann::json generator) {
    MaskSet set;
    set.image_size = image_size;
    set.generator = std::move(generator);
    set.soft = soft;
    for (SoftMask& m : masks) {
        if (m.size != image_size) {
            throw std::invalid_argument("MaskSet::from_masks: mask size differs from image size");
        }
        for (float& v : m.values) {
            v = static_cast<float>(quantize_unit(v)) / 255.0f;
        }
        auto support = binarize(m);
        if (!soft) {
            std::transform(support.begin(), support.end(), m.values.begin(),
                           [](std::uint8_t b) { return static_cast<float>(b); });
        }
        set.supports.push_back(encode_rle(support));
        set.masks.push_back(std::move(m));
    }
    return set;
}

std::vector<std::byte> encode_mask_set(const MaskSet& set) {
    if (set.masks.size() != set.supports.size()) {
        throw std::invalid_argument("mask set: masks and supports differ in count");
    }
    const std::size_t area = set.image_size.area();
    json regions = json::array();
    std::uint64_t cursor = 0;
    for (std::size_t r = 0; r < set.masks.size(); ++r) {
        if (set.masks[r].size != set.image_size) {
            throw std::invalid_argument("mask set: mask " + std::to_string(r) + " differs from image size");
        }
        decode_rle(set.supports[r], area); // rejects inconsistent runs before writing
        const std::uint64_t length = set.soft ? area : 0;
        regions.push_back({{"id", set.masks[r].region_id},
                           {"rle", set.supports[r]},
                           {"offset", cursor},
                           {"length", length}});
        cursor += length;
    }
    json header = {{"image_size", grid_json(set.image_size)},
                   {"num_regions", set.masks.size()},
                   {"soft", set.soft},
                   {"generator", set.generator},
                   {"regions", std::move(regions)}};
    std::vector<std::byte> out = assemble(kMaskMagic, header.dump());
    if (set.soft) {
        for (const SoftMask& m : set.masks) {
            for (float v : m.values) {
                out.push_back(static_cast<std::byte>(quantize_unit(v)));
            }
        }
    }
    return out;
}

void save_mask_set(const MaskSet& set, const std::filesystem::path& path) {
    const auto bytes = encode_mask_set(set);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing '" + path.string() + "'");
    }
}

nlohmann::json mask_set_header(std::span<const std::byte> source) {
    return read_preamble(source, kMaskMagic, "mask set").header;
}

MaskSet load_mask_set(std::span<const std::byte> source) {
    Preamble pre = read_preamble(source, kMaskMagic, "mask set");
    const std::size_t payload_size = source.size() - pre.payload_start;
    MaskSet set;
    try {
        const json& h = pre.header;
        set.image_size = grid_from(h.at("image_size"), "image_size");
        if (set.image_size.rows <= 0 || set.image_size.cols <= 0) {
            fail(FormatError::Kind::invalid_header, "mask set image size must be positive");
        }
        set.generator = h.at("generator");
        set.soft = h.at("soft").get<bool>();
        const json& regions = h.at("regions");
        if (h.at("num_regions").get<std::size_t>() != regions.size()) {
            fail(FormatError::Kind::invalid_header, "num_regions does not match the region table");
        }
        const std::size_t area = set.image_size.area();
        std::uint64_t expected_offset = 0;
        for (const json& r : regions) {
            const int id = r.at("id").get<int>();
            Rle runs = r.at("rle").get<Rle>();
            const auto offset = r.at("offset").get<std::uint64_t>();
            const auto length = r.at("length").get<std::uint64_t>();
            const std::uint64_t want = set.soft ? area : 0;
            if (length != want) {
                fail(FormatError::Kind::shape_mismatch, "region " + std::to_string(id) + " soft payload length " +
                                                            std::to_string(length) + ", expected " +
                                                            std::to_string(want));
            }
            if (offset != expected_offset) {
                fail(FormatError::Kind::invalid_header, "region " + std::to_string(id) + " payload is not contiguous");
            }
            if (offset + length > payload_size) {
                fail(FormatError::Kind::truncated, "mask payload truncated in region " + std::to_string(id));
            }
            expected_offset += length;

            auto support = decode_rle(runs, area);
            SoftMask mask(id, set.image_size);
            if (set.soft) {
                const auto* q = source.data() + pre.payload_start + offset;
                for (std::size_t p = 0; p < area; ++p) {
                    mask.values[p] = static_cast<float>(std::to_integer<std::uint8_t>(q[p])) / 255.0f;
                }
            } else {
                std::transform(support.begin(), support.end(), mask.values.begin(),
                               [](std::uint8_t b) { return static_cast<float>(b); });
            }
            set.masks.push_back(std::move(mask));
            set.supports.push_back(std::move(runs));
        }
        if (expected_offset != payload_size) {
            fail(FormatError::Kind::shape_mismatch, "mask payload is " + std::to_string(payload_size) +
                                                        " bytes, regions declare " + std::to_string(expected_offset));
        }
    } catch (const json::exception& e) {
        fail(FormatError::Kind::invalid_header, std::string("mask set header: ") + e.what());
    }
    return set;
}

MaskSet load_mask_set(const std::filesystem::path& path) { return load_mask_set(read_file(path)); }

} // namespace textregion
