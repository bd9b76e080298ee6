"""
URL configuration for lorentzfk.

Only the admin is served; it lists experiment runs and their stages.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
