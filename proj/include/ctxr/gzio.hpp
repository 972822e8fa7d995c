#pragma once

#include <string>
#include <vector>

namespace ctxr {

// Whole-file text helpers. Paths ending in ".gz" are gzip-framed via zlib;
// the reader also sniffs the 0x1f8b magic so either framing loads.
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

std::vector<std::string> read_lines(const std::string& path);

}  // namespace ctxr
