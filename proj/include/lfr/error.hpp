#pragma once

#include <stdexcept>
#include <string>

namespace lfr {

// Base for every error the engine raises. Callers that only care about
// "something went wrong" catch this; the CLI maps it to exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IngestError : public Error {
public:
    using Error::Error;
};

// Block store or ledger bytes disagree with their checksum or length.
class CorruptionError : public Error {
public:
    using Error::Error;
};

// Structurally valid file with the wrong version, magic, or counts.
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Ledger append that would break per-block step ordering.
class OrderingError : public Error {
public:
    using Error::Error;
};

// Value outside the admissible range (block id, NaN input, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

class SchedulingError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

}  // namespace lfr
