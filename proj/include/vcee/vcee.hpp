#pragma once

#include "vcee/asymptotics.hpp"
#include "vcee/closed_forms.hpp"
#include "vcee/config.hpp"
#include "vcee/simulation.hpp"
#include "vcee/specialized.hpp"
#include "vcee/structured.hpp"
