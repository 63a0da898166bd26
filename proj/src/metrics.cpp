#include "tbwm/metrics.hpp"

#include <filesystem>
#include <stdexcept>

#include "json.hpp"

namespace tbwm {

using nlohmann::json;

namespace {
constexpr const char* kHeader = R"({"schema":"tbwm-metrics","version":1})";
}

MetricsWriter::MetricsWriter(const std::string& path) : path_(path) {
    const bool fresh = !std::filesystem::exists(path) ||
                       std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("metrics: cannot open " + path);
    if (fresh) out_ << kHeader << '\n';
}

void MetricsWriter::write(const MetricsRecord& rec) {
    json j;
    j["type"] = rec.type;
    j["epoch"] = rec.epoch;
    j["env_steps"] = rec.env_steps;
    for (const auto& [k, v] : rec.values) j[k] = v;
    out_ << j.dump() << '\n';
    out_.flush();
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("metrics: cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("metrics: empty file");
    const json header = json::parse(line);
    if (header.value("schema", "") != "tbwm-metrics")
        throw std::runtime_error("metrics: unexpected schema header");
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        MetricsRecord rec;
        rec.type = j.value("type", "");
        rec.epoch = j.value("epoch", 0);
        rec.env_steps = j.value("env_steps", std::int64_t{0});
        for (const auto& [k, v] : j.items()) {
            if (k == "type" || k == "epoch" || k == "env_steps") continue;
            if (v.is_number()) rec.values[k] = v.get<double>();
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<std::string> read_metric_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("metrics: cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace tbwm
