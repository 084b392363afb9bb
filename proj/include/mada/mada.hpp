#pragma once

#include "mada/augment.hpp"
#include "mada/checkpoint.hpp"
#include "mada/config.hpp"
#include "mada/datamodel.hpp"
#include "mada/error.hpp"
#include "mada/eval.hpp"
#include "mada/ingest.hpp"
#include "mada/kvfile.hpp"
#include "mada/metaloop.hpp"
#include "mada/nets.hpp"
#include "mada/report.hpp"
#include "mada/train_state.hpp"
