#pragma once

// Feature-bundle (.txrb) and mask-set (.txrm) containers.
//
// Bundle layout:  "TXRB" | u32 version | u64 header length | JSON header | zero pad to 64 |
//                 tensor payloads at 64-aligned offsets relative to the payload start.
// Mask-set layout: "TXRM" | u32 version | u64 header length | JSON header | u8 soft payloads.
// All integers little-endian.

#include "textregion/head.hpp"
#include "textregion/layout.hpp"
#include "textregion/mask_ops.hpp"
#include "textregion/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace textregion {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

enum class DType { f32, f16, u8 };

std::size_t byte_width(DType t);
std::string_view to_string(DType t);

class FormatError : public std::runtime_error {
  public:
    enum class Kind { bad_magic, unsupported_version, shape_mismatch, truncated, invalid_header, invariant };

    FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raw tensor: little-endian element bytes plus shape.
struct Tensor {
    DType dtype = DType::f32;
    std::vector<std::int64_t> shape;
    std::vector<std::byte> bytes;

    static Tensor from_f32(std::vector<std::int64_t> shape, std::span<const float> values);
    static Tensor from_f16(std::vector<std::int64_t> shape, std::span<const float> values);
    static Tensor from_matrix(const Matrix& m);

    [[nodiscard]] std::size_t element_count() const;
    /// Decodes f32/f16/u8 payloads to float.
    [[nodiscard]] std::vector<float> to_f32() const;
    /// Interprets a rank-2 tensor as a matrix.
    [[nodiscard]] Matrix to_matrix() const;

    bool operator==(const Tensor&) const = default;
};

struct TensorRecord {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

/// Everything the engine needs about one image, decoupled from any model runtime.
struct FeatureBundle {
    std::string model_id;
    Grid image_size;
    int embed_dim = 0;
    std::optional<Grid> full_grid;          // required iff "values_full" present
    std::optional<CropLayout> crop_layout;  // required iff "values_crops" present
    double fusion_weight = 1.0;
    double temperature = 100.0;
    std::vector<std::string> label_names;   // one per row of "labels"
    std::map<std::string, Tensor> tensors;  // names beginning with "head." are reserved
    std::optional<HeadSpec> head;

    [[nodiscard]] bool has(const std::string& name) const { return tensors.contains(name); }
    [[nodiscard]] const Tensor& tensor(const std::string& name) const;

    /// Checks every container invariant; throws FormatError(invariant).
    void validate() const;

    bool operator==(const FeatureBundle&) const = default;
};

/// Serializes to bytes. Rejects invalid bundles before producing output.
std::vector<std::byte> encode_bundle(const FeatureBundle& bundle);
std::uint64_t write_bundle(const FeatureBundle& bundle, std::ostream& sink);
void save_bundle(const FeatureBundle& bundle, const std::filesystem::path& path);

FeatureBundle read_bundle(std::span<const std::byte> source);
FeatureBundle read_bundle(std::istream& source);
FeatureBundle load_bundle(const std::filesystem::path& path);

/// Header JSON without decoding payloads (for inspection).
nlohmann::json bundle_header(std::span<const std::byte> source);

/// Alternating background/foreground run lengths, row-major, starting with background.
using Rle = std::vector<std::uint32_t>;

Rle encode_rle(std::span<const std::uint8_t> binary);
/// Throws FormatError(shape_mismatch) when runs do not total `area`.
std::vector<std::uint8_t> decode_rle(const Rle& runs, std::size_t area);

struct MaskSet {
    Grid image_size;
    nlohmann::json generator = nlohmann::json::object();
    std::vector<SoftMask> masks; // dequantized soft values
    std::vector<Rle> supports;   // binary support per mask
    bool soft = true;            // false: values come from the RLE support alone

    /// Builds a set from float masks; supports are the >= 0.5 regions and values are
    /// quantized to u8 so the result survives a write/read cycle unchanged.
    static MaskSet from_masks(Grid image_size, std::vector<SoftMask> masks, bool soft = true,
                              nlohmann::json generator = nlohmann::json::object());

    bool operator==(const MaskSet&) const = default;
};

std::uint8_t quantize_unit(float v);

std::vector<std::byte> encode_mask_set(const MaskSet& set);
void save_mask_set(const MaskSet& set, const std::filesystem::path& path);

MaskSet load_mask_set(std::span<const std::byte> source);
MaskSet load_mask_set(const std::filesystem::path& path);
nlohmann::json mask_set_header(std::span<const std::byte> source);

std::vector<std::byte> read_file(const std::filesystem::path& path);

} // namespace textregion
