#pragma once

#include "d2dfl/common.hpp"
#include "d2dfl/data_model.hpp"
#include "d2dfl/diversity.hpp"
#include "d2dfl/exchange.hpp"
#include "d2dfl/fl.hpp"
#include "d2dfl/harness.hpp"
#include "d2dfl/net_model.hpp"
#include "d2dfl/partition.hpp"
#include "d2dfl/rl.hpp"
