#pragma once

#include <filesystem>
#include <string>

#include "thinksafe/toymodel.hpp"

namespace thinksafe {

// File layout: the magic line "THINKSAFE-CKPT 1", one line of JSON header
// {arch, config, seed, n_params, lora}, then the base parameters followed by
// any adapter parameters as raw little-endian IEEE doubles.
void save_checkpoint(const ToyLM& model, const std::filesystem::path& path);
ToyLM load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const ToyLM& model);
ToyLM deserialize_checkpoint(const std::string& bytes);

}  // namespace thinksafe
