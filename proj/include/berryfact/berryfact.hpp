#pragma once

#include "berryfact/grid.hpp"
#include "berryfact/field_io.hpp"
#include "berryfact/parallel.hpp"
#include "berryfact/model.hpp"
#include "berryfact/eigensolve.hpp"
#include "berryfact/bo_surface.hpp"
#include "berryfact/berry.hpp"
#include "berryfact/exact_fact.hpp"
#include "berryfact/experiments.hpp"
