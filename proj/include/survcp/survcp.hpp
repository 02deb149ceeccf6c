#pragma once

#include "survcp/brent.hpp"
#include "survcp/changepoint.hpp"
#include "survcp/coxph.hpp"
#include "survcp/data.hpp"
#include "survcp/frailty.hpp"
#include "survcp/km.hpp"
#include "survcp/simulate.hpp"
#include "survcp/special.hpp"
