#pragma once

#include "fracmap/analysis.hpp"
#include "fracmap/constants.hpp"
#include "fracmap/errors.hpp"
#include "fracmap/extension.hpp"
#include "fracmap/lattice.hpp"
#include "fracmap/nonlocal.hpp"
#include "fracmap/parallel.hpp"
#include "fracmap/quadrature.hpp"
#include "fracmap/solver.hpp"
#include "fracmap/weighted_pde.hpp"
