#pragma once

#include "textregion/region_engine.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace textregion::cli {

/// Process exit codes.
enum ExitCode : int {
    kOk = 0,
    kImageFailures = 1, // some images failed; the rest were processed
    kConfigError = 2,   // bad flags, missing paths, unknown query names
    kInputError = 3,    // malformed bundle, mask set, labels or annotations
};

struct RunConfig {
    std::filesystem::path bundles;
    std::filesystem::path masks;
    std::optional<std::filesystem::path> labels; // shared label file; else each bundle's own labels
    std::filesystem::path out;
    std::optional<std::filesystem::path> queries;
    std::optional<std::filesystem::path> proposals;
    std::optional<std::filesystem::path> gt;
    EngineConfig engine;
    int ignore_index = 255;
    std::string contrast_template;
    int threads = 1;
};

enum class Task { segment, refer, ground };

int run_segment(const RunConfig& config, std::ostream& out, std::ostream& err);
int run_refer(const RunConfig& config, std::ostream& out, std::ostream& err);
int run_ground(const RunConfig& config, std::ostream& out, std::ostream& err);
int run_eval(const RunConfig& config, Task task, std::ostream& out, std::ostream& err);
int run_inspect(const std::filesystem::path& file, std::ostream& out, std::ostream& err);

/// Full command-line entry point.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace textregion::cli
