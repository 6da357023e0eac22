#pragma once

// Little-endian tensor container shared by model and adapter checkpoints.
//
//   "ILRA" | u32 version | u32 count
//   per tensor: u32 name_len | name bytes | u32 rank | u64 extents[rank] | u8 dtype | payload

#include "ilora/adapter.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ilora {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Values are held in f64 regardless of the on-disk dtype.
struct CheckpointTensor {
    std::string name;
    Shape shape;
    DType dtype = DType::f64;
    std::vector<double> values;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointTensor>& tensors);
std::vector<CheckpointTensor> read_checkpoint(const std::string& path);

std::string encode_checkpoint(const std::vector<CheckpointTensor>& tensors);
std::vector<CheckpointTensor> decode_checkpoint(const std::string& bytes);

// Convenience wrappers over NamedTensor lists.
void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors, DType dtype = DType::f64);
std::vector<NamedTensor> load_tensors(const std::string& path);

} // namespace ilora
