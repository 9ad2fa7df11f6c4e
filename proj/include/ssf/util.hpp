#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ssf {

/// R-7 (linear interpolation between order statistics) percentile, p in [0, 1].
/// Takes its argument by value; the input is sorted internally.
double percentile_r7(std::vector<double> values, double p);
/// Same as percentile_r7 on data that is already sorted ascending.
double percentile_r7_sorted(std::span<const double> sorted, double p);

double mean(std::span<const double> values);
double median(std::vector<double> values);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double stdev(std::span<const double> values);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t h);
std::uint64_t hash_file(const std::filesystem::path& path);
/// Hash of every regular file below dir, keyed by relative path.
std::uint64_t hash_directory(const std::filesystem::path& dir);

/// 17 significant digits; round-trips every finite double.
std::string format_double(double v);

/// splitmix64 step; used to derive independent seeds from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ssf
