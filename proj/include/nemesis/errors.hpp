#pragma once

#include <stdexcept>
#include <string>

namespace nemesis {

// Error taxonomy. The CLI maps these onto exit codes:
//   param/usage -> 2, data/format/geometry/assembly -> 3, numeric -> 4.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents disagree with what an operation requires.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

// A caller-supplied parameter is outside its valid range.
struct ParamError : Error {
    explicit ParamError(const std::string& msg) : Error("param: " + msg) {}
};

// A file does not conform to one of the binary formats.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format: " + msg) {}
};

// Volume extents do not tile (superpatch / patch divisibility).
struct GeometryError : Error {
    explicit GeometryError(const std::string& msg) : Error("geometry: " + msg) {}
};

// A stitched assembly is missing parts or has duplicates.
struct AssemblyError : Error {
    explicit AssemblyError(const std::string& msg) : Error("assembly: " + msg) {}
};

// NaN/Inf surfaced in a computation.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

// Filesystem-level failure (open/read/write).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

}  // namespace nemesis
