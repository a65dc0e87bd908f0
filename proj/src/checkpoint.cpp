// Copyright 2026 The mcount Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <map>

#include "binary_io.hpp"
#include "mcc/error.hpp"
#include "mcc/model.hpp"

namespace mcc {

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
  detail::put_bytes(out, name);
  detail::put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) detail::put_f32(out, static_cast<float>(v));
}

}  // namespace

void save_checkpoint(CountingModel& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
  nlohmann::json header = {{"model", to_json(model.config())}, {"metadata", metadata.is_null() ? nlohmann::json::object() : metadata}};
  const std::string js = header.dump();
  std::vector<std::uint8_t> out;
  detail::put_bytes(out, "MCKP");
  out.push_back(kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(js.size()));
  detail::put_bytes(out, js);
  const auto params = model.named_parameters();
  const auto buffers = model.named_buffers();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) put_tensor(out, p.name, p.var.value());
  for (const auto& b : buffers) put_tensor(out, b.name, *b.tensor);
  detail::write_file_bytes(path, out);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader in(bytes);
  if (in.str(4) != "MCKP") fail_validation(path.string() + " is not a checkpoint (bad magic)");
  const auto version = in.u8();
  if (version != kCheckpointVersion) fail_validation("unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.str(in.u32()));
  } catch (const nlohmann::json::exception& e) {
    fail_validation(std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig config = model_config_from_json(header.at("model"));
  if (expected && expected->num_classes != config.num_classes)
    fail_validation("checkpoint has " + std::to_string(config.num_classes) + " classes, expected " +
                    std::to_string(expected->num_classes));

  LoadedCheckpoint loaded;
  loaded.model = std::make_unique<CountingModel>(config, 0);
  loaded.metadata = header.value("metadata", nlohmann::json::object());

  std::map<std::string, Tensor*> slots;
  for (auto& p : loaded.model->named_parameters()) slots[p.name] = &p.var.mutable_value();
  for (auto& b : loaded.model->named_buffers()) slots[b.name] = b.tensor;

  const std::uint32_t count = in.u32();
  std::size_t assigned = 0;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = in.str(in.u32());
    Shape shape(in.u32());
    for (int& d : shape) d = static_cast<int>(in.u32());
    auto it = slots.find(name);
    if (it == slots.end()) fail_validation("checkpoint tensor '" + name + "' does not exist in the model");
    if (it->second->shape() != shape)
      fail_validation("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                      shape_str(it->second->shape()));
    for (auto& v : it->second->values()) v = in.f32();
    ++assigned;
  }
  if (assigned != slots.size()) fail_validation("checkpoint is missing model tensors");
  if (!in.at_end()) fail_validation("trailing bytes in checkpoint");
  return loaded;
}

}  // namespace mcc
