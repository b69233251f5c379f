#pragma once

#include "rdarts/analysis.hpp"
#include "rdarts/bilevel.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace rdarts {

/// Malformed input file; the message names the file and the offending
/// location (line:column or a field path).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// --- genotypes ---------------------------------------------------------------

std::string genotype_to_json(const Genotype& g);
/// Throws ParseError for malformed text or an invalid genotype.
Genotype genotype_from_json(const std::string& text, const std::string& origin = "<string>");

void export_genotype(const Genotype& g, const std::filesystem::path& path);
Genotype import_genotype(const std::filesystem::path& path);

// --- CSV ---------------------------------------------------------------------

/// Shortest form of `v` with 9 significant digits.
std::string format_float(double v);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of column `name`; throws std::out_of_range if absent.
    std::size_t column(const std::string& name) const;
};

/// Plain comma-separated text: no quoting, one header row.
void write_csv(const std::filesystem::path& path, const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);

/// Record families. Each row set starts with a fixed header; missing values
/// are left empty.
CsvTable train_table(const std::vector<EpochMetrics>& metrics);
CsvTable mi_table(const std::vector<MIRecord>& records);
CsvTable gradnorm_table(const std::vector<GradNormRecord>& records);
CsvTable alpha_table(const std::vector<AlphaSnapshot>& snapshots, const std::vector<OperatorKind>& candidates);

/// Parses a train table back into metrics (round-trip of train_table).
std::vector<EpochMetrics> parse_train_table(const CsvTable& t);
std::vector<MIRecord> parse_mi_table(const CsvTable& t);

} // namespace rdarts
