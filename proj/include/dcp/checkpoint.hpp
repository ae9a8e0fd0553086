#pragma once

#include <string>

#include <json.hpp>

#include "dcp/model.hpp"

namespace dcp {

/// "DCPK" container: magic, u32 version, u64 metadata length, JSON metadata
/// (architecture, role, masks, head points, array manifest, caller extras),
/// then the float64 arrays in manifest order.
void save_checkpoint(const NetworkModel& model, const std::string& path,
                     const nlohmann::json& extra = nlohmann::json::object());
/// Throws FormatError on bad magic, unknown version, truncation or a
/// manifest that disagrees with the architecture.
NetworkModel load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr);

}  // namespace dcp
