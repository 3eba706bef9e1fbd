#pragma once

#include <filesystem>
#include <string>

#include "relprop/graph.hpp"

namespace relprop {

// Model-on-disk format: a `model.json` manifest (format_version 1) plus a
// `weights.bin` blob of little-endian IEEE-754 32-bit floats, each tensor
// row-major at its declared byte offset. Values are widened to 64-bit on
// load and narrowed on save.

Graph load_model(const std::filesystem::path& manifest,
                 const std::filesystem::path& weights);
void save_model(const Graph& graph, const std::filesystem::path& manifest,
                const std::filesystem::path& weights);

// Directory convenience: <dir>/model.json + <dir>/weights.bin.
Graph load_model_dir(const std::filesystem::path& dir);
void save_model_dir(const Graph& graph, const std::filesystem::path& dir);

}  // namespace relprop
