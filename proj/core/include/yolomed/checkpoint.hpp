#pragma once

#include <string>
#include <vector>

#include "yolomed/model.hpp"

namespace yolomed {

// Single-archive checkpoint mapping hierarchical parameter/buffer names to
// tensors, with the model config embedded as JSON.
void save_checkpoint(const YoloMedNet& net, const std::string& path);

struct CheckpointContents {
    ModelConfig config;
    std::vector<std::pair<std::string, ag::Tensor>> params;
    std::vector<std::pair<std::string, ag::Tensor>> buffers;
};

CheckpointContents read_checkpoint(const std::string& path);

// Rebuilds the network from the embedded config and restores all tensors.
// Any name or shape mismatch is a hard error listing the offending names.
std::unique_ptr<YoloMedNet> load_checkpoint(const std::string& path);

struct ImportReport {
    std::vector<std::string> matched;
    std::vector<std::string> unmatched_in_file;
    std::vector<std::string> unmatched_in_model;
};

// Lenient name-matching import for externally supplied pretrained weights.
ImportReport import_pretrained(YoloMedNet& net, const std::string& path);

}  // namespace yolomed
