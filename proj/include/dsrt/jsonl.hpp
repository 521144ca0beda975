// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dsrt/errors.hpp"

namespace dsrt {

// Append-only JSONL sink (one object per line), used for per-step metrics.
class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::filesystem::path& path) {
        std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::app);
        if (!out_) throw IoError("metrics: cannot open " + path.string());
    }

    void write(const nlohmann::json& obj) {
        if (!out_.is_open()) return;
        out_ << obj.dump() << "\n";
    }

    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace dsrt
