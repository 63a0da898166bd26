#pragma once

// Append-only line-delimited metrics: a schema header line followed by one
// JSON object per record.

#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace tbwm {

struct MetricsRecord {
    std::string type;  // "epoch" or "eval"
    int epoch = 0;
    std::int64_t env_steps = 0;
    std::map<std::string, double> values;
};

class MetricsWriter {
public:
    MetricsWriter() = default;
    // Opens for appending; writes the schema header when the file is new.
    explicit MetricsWriter(const std::string& path);

    void write(const MetricsRecord& rec);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
};

// Whole-file reader (schema header validated).
std::vector<MetricsRecord> read_metrics(const std::string& path);

// Raw lines, for bitwise stream comparisons in tests.
std::vector<std::string> read_metric_lines(const std::string& path);

}  // namespace tbwm
