/* Copyright 2026 The STILL Attention Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace still::cli {

enum ExitCode : int { kOk = 0, kFailed = 1, kUsage = 2 };

/// Parses and runs one invocation (argv[0] is the program name). Progress
/// and errors go to `err`.
/// args[0] is the program name, as in argv.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace still::cli
