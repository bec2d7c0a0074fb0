#pragma once

// End-to-end commands behind the CLI. Each takes a JSON request whose keys
// mirror the command-line flags and returns the report text (JSON or CSV).
// Missing or contradictory request fields raise usage errors before any work.

#include <string>
#include <string_view>
#include <vector>

#include "kvsink/serialization.hpp"

namespace kvsink {

std::vector<std::string> workflow_names();

std::string run_workflow(std::string_view command, const Json& request);

}  // namespace kvsink
