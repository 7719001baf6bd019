#pragma once

#include "attack.hpp"
#include "checkpoint.hpp"
#include "eval.hpp"
#include "lora.hpp"
#include "macdrop.hpp"
#include "model.hpp"
#include "probe.hpp"
#include "probe_stream.hpp"
#include "schedule.hpp"
#include "token_stream.hpp"
#include "trace.hpp"
#include "train.hpp"
#include "plant.hpp"
