"""
API路由模块
"""

from . import analytics

__all__ = ['analytics']
