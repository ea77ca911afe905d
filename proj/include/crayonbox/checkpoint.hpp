#pragma once

#include <string>

#include "crayonbox/model.hpp"

namespace crayonbox {

// Binary "CRYN" format, version 1: config snapshot, named float32 tensors,
// and packed NF4 sections with their block metadata. Little-endian payloads;
// load(save(model)) is bit-exact.
void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace crayonbox
