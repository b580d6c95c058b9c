#pragma once

#include <stdexcept>
#include <string>

namespace bam {

// Base class for every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonUnitVector : Error { using Error::Error; };
struct UnsupportedDegree : Error { using Error::Error; };
struct InvalidPath : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct BadCell : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct DegenerateEdge : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct UnknownLeaf : Error { using Error::Error; };
struct NoCell : Error { using Error::Error; };
struct UnknownSpecies : Error { using Error::Error; };
struct MissingLabel : Error { using Error::Error; };
struct NotReady : Error { using Error::Error; };
struct DivergedGradient : Error { using Error::Error; };
struct DivergedTraining : Error { using Error::Error; };
struct NoData : Error { using Error::Error; };
struct DegenerateNormalization : Error { using Error::Error; };
struct DegenerateCalibration : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct SplitError : Error { using Error::Error; };
struct IncompatibleCheckpoint : Error { using Error::Error; };
struct CorruptCheckpoint : Error { using Error::Error; };
struct BudgetTooLarge : Error { using Error::Error; };

}  // namespace bam
