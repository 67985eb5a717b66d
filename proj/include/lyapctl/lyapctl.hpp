#pragma once

#include "lyapctl/numerics.hpp"
#include "lyapctl/csv.hpp"
#include "lyapctl/dynamics.hpp"
#include "lyapctl/environments.hpp"
#include "lyapctl/neural.hpp"
#include "lyapctl/lyapunov.hpp"
#include "lyapctl/replay.hpp"
#include "lyapctl/agent.hpp"
#include "lyapctl/metrics.hpp"
#include "lyapctl/train.hpp"
#include "lyapctl/config.hpp"
#include "lyapctl/experiment.hpp"
