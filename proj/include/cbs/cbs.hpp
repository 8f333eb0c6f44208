#pragma once

#include "cbs/core/dataset_io.hpp"
#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"
#include "cbs/elicitation.hpp"
#include "cbs/error.hpp"
#include "cbs/geometry.hpp"
#include "cbs/manifold.hpp"
#include "cbs/oracle.hpp"
#include "cbs/plots.hpp"
#include "cbs/probes.hpp"
#include "cbs/steering.hpp"
