#pragma once
// Umbrella header.

#include "phoenix/datapath.hpp"
#include "phoenix/emulator.hpp"
#include "phoenix/minifloat.hpp"
#include "phoenix/model_io.hpp"
#include "phoenix/netgraph.hpp"
#include "phoenix/perfmodel.hpp"
#include "phoenix/quantizer.hpp"
#include "phoenix/tensor.hpp"
