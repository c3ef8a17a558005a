#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tdml::cli {

struct RunOptions {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

/// Exit codes: 0 honest completion, 3 detections fired, 2 configuration error.
int run(const std::filesystem::path& scenario, const RunOptions& opts, std::ostream& out, std::ostream& err);

/// Exit codes: 0 verified, 1 verification failed, 2 missing files.
int verify(const std::filesystem::path& dir, std::ostream& out, std::ostream& err);

struct CompareRow {
    std::uint64_t epoch = 0;
    double a = 0.0;
    double b = 0.0;
    double delta = 0.0; // b - a
};

struct Comparison {
    std::vector<CompareRow> rows;
    double final_gap = 0.0; // final b - final a
};

/// Per-epoch global accuracy of two metrics.csv texts. Throws SchemaMismatch when the
/// headers or epoch sets differ.
Comparison compare_metrics(std::string_view a, std::string_view b);
std::string format_comparison(const Comparison& c);

/// Accepts metrics.csv files or run directories. Exit codes: 0 ok, 2 on missing input or
/// schema mismatch.
int compare(const std::filesystem::path& a, const std::filesystem::path& b, std::ostream& out, std::ostream& err);

/// Entry point shared by the executable: parses argv with CLI11.
int main(int argc, char** argv);

} // namespace tdml::cli
